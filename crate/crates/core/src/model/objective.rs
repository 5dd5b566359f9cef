//! Per-sample forward traces and the backward pass of the joint objective.

use rand::SeedableRng;

use crate::diffcore::{
    global_avg_pool, global_avg_pool_backward, grad_check, grad_check_sampled, grl_backward,
    relu, relu_backward, softmax, GradCheckReport, ParamSet, Tensor,
};
use crate::error::{Error, Result};
use crate::losses::{adv_domain_loss, mse_liveness, total_loss, LossConfig};
use crate::parallel::Exec;
use crate::pdle::EncodedSample;

use super::{conv_names, expected_score, normalize_input, INPUT_SCALE, LivenessModel, DOM_B, DOM_W, LIVE_B, LIVE_W};

/// Activations kept from the encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Input of each conv block.
    inputs: Vec<Tensor>,
    /// Pre-activation output of each conv block.
    pre: Vec<Tensor>,
    pub feature: Tensor,
}

#[derive(Debug, Clone)]
pub struct SampleForward {
    pub trace: EncoderTrace,
    pub probs: Vec<f64>,
    pub rho: f64,
    domain_hidden_pre: Option<Tensor>,
    pub domain_logits: Option<Vec<f64>>,
}

/// Per-sample weights of the two loss terms inside a batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    /// Multiplies `(rho - y)^2`.
    pub score: f64,
    /// Multiplies the domain cross-entropy.
    pub domain: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mse: f64,
    /// `None` when the model has no discriminator.
    pub adv: Option<f64>,
    pub total: f64,
    pub scores: Vec<f64>,
}

fn accumulate(grads: &mut ParamSet, name: &str, delta: &Tensor) -> Result<()> {
    grads.get_mut(name)?.axpy(1.0, delta)
}

impl LivenessModel {
    pub fn encode_traced(&self, x: &Tensor) -> Result<EncoderTrace> {
        self.check_input(x)?;
        let convs = self.config.convs();
        let mut inputs = Vec::with_capacity(convs.len());
        let mut pre = Vec::with_capacity(convs.len());
        let mut a = normalize_input(x);
        for (i, conv) in convs.iter().enumerate() {
            let (w, b) = conv_names(i);
            let z = conv.forward(self.params.get(&w)?, self.params.get(&b)?, &a)?;
            inputs.push(std::mem::replace(&mut a, relu(&z)));
            pre.push(z);
        }
        let feature = global_avg_pool(&a)?;
        Ok(EncoderTrace {
            inputs,
            pre,
            feature,
        })
    }

    /// Backpropagates `d_feature` through the encoder, accumulating into
    /// `grads`. Returns the input gradient when requested.
    pub fn encoder_backward(
        &self,
        trace: &EncoderTrace,
        d_feature: &Tensor,
        grads: &mut ParamSet,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let convs = self.config.convs();
        let last = convs.len() - 1;
        let mut d = global_avg_pool_backward(trace.pre[last].shape(), d_feature)?;
        for i in (0..convs.len()).rev() {
            d = relu_backward(&trace.pre[i], &d)?;
            let (w, b) = conv_names(i);
            let want_dx = i > 0 || need_input_grad;
            let (dw, db, dx) =
                convs[i].backward(self.params.get(&w)?, &trace.inputs[i], &d, want_dx)?;
            accumulate(grads, &w, &dw)?;
            accumulate(grads, &b, &db)?;
            match dx {
                Some(dx) if i > 0 => d = dx,
                dx => return Ok(dx.map(|d| d.map(|v| v * INPUT_SCALE))),
            }
        }
        unreachable!("encoder has at least one block")
    }

    pub fn forward_sample(&self, x: &Tensor) -> Result<SampleForward> {
        let trace = self.encode_traced(x)?;
        let probs = self.liveness_probs(&trace.feature)?;
        let rho = expected_score(&probs, &self.bins)?;
        let (domain_hidden_pre, domain_logits) = if self.config.has_domain_head() {
            let (d0, d1) = self.config.domain_layers();
            let h = d0.forward(
                self.params.get(DOM_W[0])?,
                self.params.get(DOM_B[0])?,
                &trace.feature,
            )?;
            let o = d1.forward(self.params.get(DOM_W[1])?, self.params.get(DOM_B[1])?, &relu(&h))?;
            (Some(h), Some(o.into_data()))
        } else {
            (None, None)
        };
        Ok(SampleForward {
            trace,
            probs,
            rho,
            domain_hidden_pre,
            domain_logits,
        })
    }

    /// Gradient of `w.score * (rho - target)^2 + w.domain * CE(domain)`.
    /// The discriminator's gradient reaches the encoder through the GRL, i.e.
    /// multiplied by `-w.beta`.
    pub fn backward_sample(
        &self,
        fwd: &SampleForward,
        target: f64,
        domain: Option<usize>,
        w: ObjectiveWeights,
        need_input_grad: bool,
    ) -> Result<(ParamSet, Option<Tensor>)> {
        let mut grads = self.params.zeros_like();
        let feature = &fwd.trace.feature;

        // d rho / d z_i = p_i (c_i - rho)
        let d_rho = w.score * 2.0 * (fwd.rho - target);
        let d_logits: Vec<f64> = fwd
            .probs
            .iter()
            .zip(self.bins.values())
            .map(|(p, c)| d_rho * p * (c - fwd.rho))
            .collect();
        let head = self.config.liveness_head();
        let (dw, db, mut d_feature) = head.backward(
            self.params.get(LIVE_W)?,
            feature,
            &Tensor::from_raw(vec![head.outputs], d_logits),
        )?;
        accumulate(&mut grads, LIVE_W, &dw)?;
        accumulate(&mut grads, LIVE_B, &db)?;

        if let (Some(id), Some(logits), Some(h_pre)) =
            (domain, &fwd.domain_logits, &fwd.domain_hidden_pre)
        {
            if id >= logits.len() {
                return Err(Error::DomainOutOfRange {
                    id,
                    domains: logits.len(),
                });
            }
            let mut d_out = softmax(logits)?;
            d_out[id] -= 1.0;
            d_out.iter_mut().for_each(|v| *v *= w.domain);
            let (d0, d1) = self.config.domain_layers();
            let hidden = relu(h_pre);
            let (dw1, db1, d_hidden) = d1.backward(
                self.params.get(DOM_W[1])?,
                &hidden,
                &Tensor::from_raw(vec![d1.outputs], d_out),
            )?;
            accumulate(&mut grads, DOM_W[1], &dw1)?;
            accumulate(&mut grads, DOM_B[1], &db1)?;
            let d_pre = relu_backward(h_pre, &d_hidden)?;
            let (dw0, db0, d_feat_dom) = d0.backward(self.params.get(DOM_W[0])?, feature, &d_pre)?;
            accumulate(&mut grads, DOM_W[0], &dw0)?;
            accumulate(&mut grads, DOM_B[0], &db0)?;
            d_feature.axpy(1.0, &grl_backward(&d_feat_dom, w.beta)?)?;
        }

        let dx = self.encoder_backward(&fwd.trace, &d_feature, &mut grads, need_input_grad)?;
        Ok((grads, dx))
    }

    /// Joint objective `alpha * MSE + (1 - alpha) * CE` over a batch and its
    /// parameter gradient. Samples are processed independently and their
    /// gradients summed in batch order, so the result does not depend on
    /// `exec`.
    pub fn loss_and_grad(
        &self,
        batch: &[EncodedSample],
        loss: &LossConfig,
        exec: Exec,
    ) -> Result<(BatchLoss, ParamSet)> {
        loss.validate()?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = batch.len() as f64;
        let use_domain = self.config.has_domain_head();
        let weights = ObjectiveWeights {
            score: loss.alpha / n,
            domain: if use_domain { (1.0 - loss.alpha) / n } else { 0.0 },
            beta: loss.beta,
        };
        let per_sample = exec.try_map(batch.len(), |j| -> Result<(f64, Option<Vec<f64>>, ParamSet)> {
            let s = &batch[j];
            let fwd = self.forward_sample(&s.image)?;
            let domain = use_domain.then_some(s.domain);
            let (g, _) = self.backward_sample(&fwd, s.y_tilde, domain, weights, false)?;
            Ok((fwd.rho, fwd.domain_logits, g))
        })?;

        let mut grads = self.params.zeros_like();
        let mut scores = Vec::with_capacity(batch.len());
        let mut logits = Vec::new();
        for (rho, dl, g) in per_sample {
            grads.axpy(1.0, &g)?;
            scores.push(rho);
            if let Some(dl) = dl {
                logits.push(dl);
            }
        }
        let targets: Vec<f64> = batch.iter().map(|s| s.y_tilde).collect();
        let mse = mse_liveness(&scores, &targets)?;
        let adv = if use_domain {
            let ids: Vec<usize> = batch.iter().map(|s| s.domain).collect();
            Some(adv_domain_loss(&logits, &ids)?)
        } else {
            None
        };
        let effective = if use_domain {
            *loss
        } else {
            LossConfig { alpha: 1.0, ..*loss }
        };
        let total = total_loss(mse, adv.unwrap_or(0.0), &effective);
        Ok((
            BatchLoss {
                mse,
                adv,
                total,
                scores,
            },
            grads,
        ))
    }

    /// Finite-difference check of [`loss_and_grad`](Self::loss_and_grad).
    ///
    /// Head and discriminator parameters are checked against the batch
    /// objective itself. Encoder parameters receive the discriminator signal
    /// through the gradient reversal layer, so their reference is the
    /// derivative of `alpha * mse - beta * (1 - alpha) * adv`. With
    /// `per_tensor = Some(n)` only `n` random coordinates of each tensor are
    /// probed.
    pub fn objective_grad_check(
        &self,
        batch: &[EncodedSample],
        loss: &LossConfig,
        epsilon: f64,
        per_tensor: Option<usize>,
    ) -> Result<GradCheckReport> {
        let has_domain = self.config.has_domain_head();
        let split = |encoder: bool| -> Result<ParamSet> {
            let mut part = ParamSet::new();
            for (name, t) in self.params.iter() {
                if name.starts_with("enc.") == encoder {
                    part.insert(name, t.clone())?;
                }
            }
            Ok(part)
        };
        let objective = |encoder: bool| {
            move |part: &ParamSet| -> Result<(f64, ParamSet)> {
                let mut params = self.params.clone();
                for (name, t) in part.iter() {
                    *params.get_mut(name)? = t.clone();
                }
                let model = LivenessModel::from_params(self.config.clone(), params)?;
                let (l, g) = model.loss_and_grad(batch, loss, Exec::Sequential)?;
                let value = match (encoder, l.adv) {
                    (true, Some(adv)) if has_domain => {
                        loss.alpha * l.mse - loss.beta * (1.0 - loss.alpha) * adv
                    }
                    _ => l.total,
                };
                let mut grads = ParamSet::new();
                for (name, _) in part.iter() {
                    grads.insert(name, g.get(name)?.clone())?;
                }
                Ok((value, grads))
            }
        };
        let mut rng = crate::rng::Rng::seed_from_u64(0x6772_6164);
        let mut merged: Option<GradCheckReport> = None;
        for encoder in [true, false] {
            let point = split(encoder)?;
            if point.is_empty() {
                continue;
            }
            let r = match per_tensor {
                None => grad_check(objective(encoder), &point, epsilon)?,
                Some(n) => grad_check_sampled(objective(encoder), &point, epsilon, n, &mut rng)?,
            };
            merged = Some(match merged {
                None => r,
                Some(m) => {
                    let checked = m.checked + r.checked;
                    let mut best = if r.max_rel_error > m.max_rel_error { r } else { m };
                    best.checked = checked;
                    best
                }
            });
        }
        merged.ok_or_else(|| Error::InvalidArgument("model has no parameters".into()))
    }

    /// Gradient of `<feature(x), d_feature>` with respect to the parameters
    /// and the input image.
    pub fn encode_backward(&self, x: &Tensor, d_feature: &Tensor) -> Result<(ParamSet, Tensor)> {
        let trace = self.encode_traced(x)?;
        let mut grads = self.params.zeros_like();
        let dx = self
            .encoder_backward(&trace, d_feature, &mut grads, true)?
            .expect("input gradient requested");
        Ok((grads, dx))
    }
}
