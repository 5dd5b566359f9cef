//! The regression network: a strided convolutional encoder, a `(K+1)`-way
//! liveness head whose softmax expectation over fixed bin values is the
//! liveness score, and a domain discriminator that sits behind a gradient
//! reversal layer.

mod checkpoint;
mod objective;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use objective::{BatchLoss, EncoderTrace, ObjectiveWeights, SampleForward};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{global_avg_pool, relu, softmax, Conv2d, Dense, ParamSet, Tensor};
use crate::error::{ensure_finite, Error, Result};
use crate::rng;

/// Values `c_0..c_K` of the discrete liveness variable: `c_i = i / K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSet {
    k: usize,
    values: Vec<f64>,
}

impl BinSet {
    pub fn new(k: usize) -> Result<BinSet> {
        if k < 1 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let values = (0..=k)
            .map(|i| match i {
                0 => 0.0,
                i if i == k => 1.0,
                i => i as f64 / k as f64,
            })
            .collect();
        Ok(BinSet { k, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Shorthand for [`BinSet::new`].
pub fn bin_values(k: usize) -> Result<BinSet> {
    BinSet::new(k)
}

/// `rho = sum_i c_i p_i`, clamped to `[0, 1]` against rounding.
pub fn expected_score(p: &[f64], bins: &BinSet) -> Result<f64> {
    if p.len() != bins.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![bins.len()],
            actual: vec![p.len()],
        });
    }
    ensure_finite("probability vector", p)?;
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "not a probability vector (sum {sum})"
        )));
    }
    let rho: f64 = p.iter().zip(bins.values()).map(|(p, c)| p * c).sum();
    Ok(rho.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Discretization level; the liveness head has `k + 1` outputs.
    pub k: usize,
    /// Number of domain classes for the discriminator (0 or 1 disables it).
    pub domains: usize,
    /// GRL coefficient.
    pub beta: f64,
    /// Output channels of the stride-2 conv blocks; the last one is the
    /// feature dimension.
    pub encoder_widths: Vec<usize>,
    pub domain_hidden: usize,
    /// Expected input `(height, width)`.
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 10,
            domains: 3,
            beta: 1.0,
            encoder_widths: vec![16, 32, 64],
            domain_hidden: 32,
            input_size: (56, 56),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "encoder widths must be positive, got {:?}",
                self.encoder_widths
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.has_domain_head() && self.domain_hidden == 0 {
            return Err(Error::InvalidArgument("domain_hidden must be positive".into()));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::InvalidArgument("input size must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated non-empty")
    }

    pub fn has_domain_head(&self) -> bool {
        self.domains >= 2
    }

    pub(crate) fn convs(&self) -> Vec<Conv2d> {
        let mut prev = 3;
        self.encoder_widths
            .iter()
            .map(|&w| {
                let c = Conv2d::new(prev, w);
                prev = w;
                c
            })
            .collect()
    }

    pub(crate) fn liveness_head(&self) -> Dense {
        Dense::new(self.feature_dim(), self.k + 1)
    }

    pub(crate) fn domain_layers(&self) -> (Dense, Dense) {
        (
            Dense::new(self.feature_dim(), self.domain_hidden),
            Dense::new(self.domain_hidden, self.domains),
        )
    }
}

pub(crate) fn conv_names(i: usize) -> (String, String) {
    (format!("enc.{i}.w"), format!("enc.{i}.b"))
}

pub(crate) const LIVE_W: &str = "live.w";
pub(crate) const LIVE_B: &str = "live.b";
pub(crate) const DOM_W: [&str; 2] = ["dom.0.w", "dom.1.w"];
pub(crate) const DOM_B: [&str; 2] = ["dom.0.b", "dom.1.b"];

#[derive(Debug, Clone, PartialEq)]
pub struct LivenessModel {
    config: ModelConfig,
    bins: BinSet,
    params: ParamSet,
}

/// Pixels enter the encoder as `(x - INPUT_SHIFT) * INPUT_SCALE`.
pub const INPUT_SHIFT: f64 = 0.5;
pub const INPUT_SCALE: f64 = 4.0;

pub(crate) fn normalize_input(x: &Tensor) -> Tensor {
    x.map(|v| (v - INPUT_SHIFT) * INPUT_SCALE)
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("finite init")
}

fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl LivenessModel {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<LivenessModel> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[0x1417]);
        let mut params = ParamSet::new();
        for (i, conv) in config.convs().iter().enumerate() {
            let (w, b) = conv_names(i);
            let fan_in = conv.kernel * conv.kernel * conv.in_channels;
            params.insert(w, uniform_init(&conv.weight_shape(), init_bound(fan_in), &mut rng))?;
            params.insert(b, Tensor::zeros(&[conv.out_channels]))?;
        }
        let head = config.liveness_head();
        params.insert(LIVE_W, uniform_init(&head.weight_shape(), init_bound(head.inputs), &mut rng))?;
        params.insert(LIVE_B, Tensor::zeros(&[head.outputs]))?;
        if config.has_domain_head() {
            let (d0, d1) = config.domain_layers();
            params.insert(DOM_W[0], uniform_init(&d0.weight_shape(), init_bound(d0.inputs), &mut rng))?;
            params.insert(DOM_B[0], Tensor::zeros(&[d0.outputs]))?;
            params.insert(DOM_W[1], uniform_init(&d1.weight_shape(), init_bound(d1.inputs), &mut rng))?;
            params.insert(DOM_B[1], Tensor::zeros(&[d1.outputs]))?;
        }
        Ok(LivenessModel {
            bins: BinSet::new(config.k)?,
            config,
            params,
        })
    }

    /// Rebuilds a model from explicit parameters; names and shapes must match
    /// what `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<LivenessModel> {
        let template = LivenessModel::init(config.clone(), 0)?;
        template.params.expect_same_layout(&params)?;
        if !params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(LivenessModel {
            bins: template.bins,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bins(&self) -> &BinSet {
        &self.bins
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.expect_same_layout(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        self.config.beta = beta;
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        x.expect_shape(&[h, w, 3])
    }

    /// Feature vector of an `H×W×3` image.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut a = normalize_input(x);
        for (i, conv) in self.config.convs().iter().enumerate() {
            let (w, b) = conv_names(i);
            a = relu(&conv.forward(self.params.get(&w)?, self.params.get(&b)?, &a)?);
        }
        global_avg_pool(&a)
    }

    pub fn liveness_logits(&self, feature: &Tensor) -> Result<Tensor> {
        if !feature.is_finite() {
            return Err(Error::NonFinite("feature".into()));
        }
        self.config.liveness_head().forward(
            self.params.get(LIVE_W)?,
            self.params.get(LIVE_B)?,
            feature,
        )
    }

    pub fn liveness_probs(&self, feature: &Tensor) -> Result<Vec<f64>> {
        softmax(self.liveness_logits(feature)?.data())
    }

    /// Discriminator logits. The GRL is identity in the forward direction,
    /// so `beta` does not affect the value; it is accepted to mirror the
    /// backward contract.
    pub fn domain_logits(&self, feature: &Tensor, beta: f64) -> Result<Tensor> {
        if !self.config.has_domain_head() {
            return Err(Error::InvalidArgument(format!(
                "domain discriminator needs at least 2 domains, model has {}",
                self.config.domains
            )));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        let reversed = crate::diffcore::grl_forward(feature);
        let (d0, d1) = self.config.domain_layers();
        let h = relu(&d0.forward(
            self.params.get(DOM_W[0])?,
            self.params.get(DOM_B[0])?,
            &reversed,
        )?);
        d1.forward(self.params.get(DOM_W[1])?, self.params.get(DOM_B[1])?, &h)
    }

    /// Liveness score in `[0, 1]`.
    pub fn predict(&self, x: &Tensor) -> Result<f64> {
        let feature = self.encode(x)?;
        let p = self.liveness_probs(&feature)?;
        expected_score(&p, &self.bins)
    }
}
