//! Manipulation trace attention (MTA).
//!
//! Two gates refine a feature map `F`:
//!
//! - the DP gate pools `F` globally by average and by max, pushes both pooled
//!   vectors through one shared two-layer 1x1 network, and sums the results
//!   into a channel attention map `M_c` of shape `(n, c, 1, 1)`;
//! - the MT gate filters `F` with a fixed gradient-operator kernel into a
//!   trace map `M_t`.
//!
//! Fusion applies sigmoids and a learnable scalar:
//! `A = sigmoid(M_c) + sigmoid(alpha * M_t)`, every element in `(0, 2)`.
//! The modulated mode (default) returns `F * A`; the literal mode returns
//! `A` itself, exactly as the fusion equation is written. Both keep the
//! input shape.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradop::{self, OperatorName, TPMode};
use crate::init;
use crate::tensor::{Dims, Element, PaddingMode, Tensor};

/// Whether the fused attention map gates the features or is returned as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `F' = F * A`. Default: attention conventionally modulates features,
    /// and the module is embedded in residual blocks as a refinement.
    Modulated,
    /// `F' = A`, the fusion equation taken literally.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MTAConfig {
    /// Channel count of the host feature map; filled in per block by the
    /// network builder.
    pub channels: usize,
    /// Bottleneck divisor of the shared network.
    pub reduction: usize,
    pub operator: OperatorName,
    pub fusion_mode: FusionMode,
    pub alpha_init: f64,
    /// Same channel-sum switch as TP: depthwise keeps `(n, c, h, w)`; the
    /// literal sum collapses `M_t` to one channel that broadcasts over `c`.
    pub mt_mode: TPMode,
}

impl Default for MTAConfig {
    fn default() -> Self {
        MTAConfig {
            channels: 0,
            reduction: 16,
            operator: OperatorName::PrewittD,
            fusion_mode: FusionMode::Modulated,
            alpha_init: 1.0,
            mt_mode: TPMode::Depthwise,
        }
    }
}

impl MTAConfig {
    pub fn for_channels(&self, channels: usize) -> Self {
        MTAConfig {
            channels,
            // The bottleneck needs at least one unit.
            reduction: self.reduction.min(channels).max(1),
            ..*self
        }
    }
}

/// Per-block MTA parameters. The shared network is a single parameter set
/// used by both pooled paths; the MT kernel is fixed (trainable = false when
/// registered).
pub struct MTAState<E: Element> {
    pub config: MTAConfig,
    pub fc1_weight: Tensor<E>,
    pub fc1_bias: Tensor<E>,
    pub fc2_weight: Tensor<E>,
    pub fc2_bias: Tensor<E>,
    pub alpha: Tensor<E>,
    pub mt_weight: Tensor<E>,
    pub mt_aux_weight: Option<Tensor<E>>,
}

impl<E: Element> MTAState<E> {
    pub fn new(config: MTAConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = config.channels;
        if c == 0 {
            return Err(Error::Config("MTA channels must be positive".into()));
        }
        if config.reduction == 0 || c / config.reduction == 0 {
            return Err(Error::Config(format!(
                "MTA reduction {} leaves no bottleneck units for {} channels",
                config.reduction, c
            )));
        }
        let bottleneck = c / config.reduction;
        let k = gradop::kernel(config.operator);
        let (mt_weight, mt_aux_weight) = match config.mt_mode {
            TPMode::Depthwise => (k.depthwise_weight::<E>(c), k.depthwise_aux_weight::<E>(c)),
            TPMode::SummedSingle => (k.summed_weight::<E>(c), k.summed_aux_weight::<E>(c)),
        };
        Ok(MTAState {
            config,
            fc1_weight: init::he_normal(Dims::new(bottleneck, c, 1, 1), c, rng),
            fc1_bias: init::constant_grad(Dims::new(1, bottleneck, 1, 1), 0.0),
            fc2_weight: init::he_normal(Dims::new(c, bottleneck, 1, 1), bottleneck, rng),
            fc2_bias: init::constant_grad(Dims::new(1, c, 1, 1), 0.0),
            alpha: init::constant_grad(Dims::new(1, 1, 1, 1), config.alpha_init),
            mt_weight,
            mt_aux_weight,
        })
    }

    /// The shared two-layer 1x1 network with ReLU between; applied to both
    /// pooled paths with the same parameters.
    pub fn shared_net(&self, pooled: &Tensor<E>) -> Result<Tensor<E>> {
        pooled
            .conv2d(&self.fc1_weight, Some(&self.fc1_bias), 1, PaddingMode::Zero(0), 1)?
            .relu()?
            .conv2d(&self.fc2_weight, Some(&self.fc2_bias), 1, PaddingMode::Zero(0), 1)
    }

    fn check_channels(&self, op: &'static str, input: &Tensor<E>) -> Result<()> {
        if input.dims().c != self.config.channels {
            return Err(Error::shape(
                op,
                format!(
                    "input {} does not match MTA channels {}",
                    input.dims(),
                    self.config.channels
                ),
            ));
        }
        Ok(())
    }
}

/// Channel attention from double pooling; raw (pre-sigmoid) values.
pub fn dp_gate<E: Element>(input: &Tensor<E>, state: &MTAState<E>) -> Result<Tensor<E>> {
    state.check_channels("dp_gate", input)?;
    let avg = state.shared_net(&input.global_avg_pool()?)?;
    let max = state.shared_net(&input.global_max_pool()?)?;
    avg.add(&max)
}

/// Trace attention: fixed gradient-operator response of the feature map.
pub fn mt_gate<E: Element>(input: &Tensor<E>, state: &MTAState<E>) -> Result<Tensor<E>> {
    state.check_channels("mt_gate", input)?;
    let groups = match state.config.mt_mode {
        TPMode::Depthwise => state.config.channels,
        TPMode::SummedSingle => 1,
    };
    gradop::fixed_response(
        input,
        &state.mt_weight,
        state.mt_aux_weight.as_ref(),
        PaddingMode::Replicate(1),
        groups,
    )
}

/// Full MTA pass: gates, sigmoids, learnable alpha, fusion.
pub fn mta_forward<E: Element>(input: &Tensor<E>, state: &MTAState<E>) -> Result<Tensor<E>> {
    let m_c = dp_gate(input, state)?;
    let m_t = mt_gate(input, state)?;
    let attention = m_c
        .sigmoid()?
        .add(&m_t.scale_by(&state.alpha)?.sigmoid()?)?;
    match state.config.fusion_mode {
        FusionMode::Modulated => input.mul(&attention),
        FusionMode::Literal => {
            // Broadcast up to the input shape so both modes share the
            // output-dims contract.
            if attention.dims() == input.dims() {
                Ok(attention)
            } else {
                attention.add(&Tensor::zeros(input.dims()))
            }
        }
    }
}
