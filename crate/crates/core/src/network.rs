//! Model assembly: ResNet-style basic blocks, the mini/full backbones, and
//! the single/dual-stream variants used in the ablations.
//!
//! The dual network runs two independent backbones: the first stream sees
//! the fixed gradient-operator refinement of the input, the second embeds an
//! MTA block after the second batch norm of every basic block. Stream
//! features are global-average-pooled vectors fused by element-wise sum and
//! classified by one fully connected layer.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradop::{TPConfig, TpLayer};
use crate::init;
use crate::mta::{mta_forward, MTAConfig, MTAState};
use crate::rng::substream;
use crate::tensor::{Dims, Element, Mode, PaddingMode, ParamStore, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-5;
/// Basic blocks per stage (ResNet-18 layout).
const BLOCKS_PER_STAGE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain single-stream backbone.
    BaseNet,
    /// TP refinement in front of the backbone.
    TpBaseNet,
    /// MTA embedded in each basic block.
    BaseNetMta,
    /// MTA with the trace gate replaced by a learnable depthwise conv.
    BaseNetMtaConv,
    /// TP and MTA together in one stream.
    GocNetSingle,
    /// The full dual-stream network: TP stream + MTA stream.
    GocNetDual,
    /// Dual-stream ablation rows: two plain streams, TP only, MTA only.
    GocNetDualPlain,
    GocNetDualTp,
    GocNetDualMta,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::BaseNet,
        Variant::TpBaseNet,
        Variant::BaseNetMta,
        Variant::BaseNetMtaConv,
        Variant::GocNetSingle,
        Variant::GocNetDual,
        Variant::GocNetDualPlain,
        Variant::GocNetDualTp,
        Variant::GocNetDualMta,
    ];

    pub fn is_dual(&self) -> bool {
        matches!(
            self,
            Variant::GocNetDual
                | Variant::GocNetDualPlain
                | Variant::GocNetDualTp
                | Variant::GocNetDualMta
        )
    }

    fn has_tp(&self) -> bool {
        matches!(
            self,
            Variant::TpBaseNet
                | Variant::GocNetSingle
                | Variant::GocNetDual
                | Variant::GocNetDualTp
        )
    }

    fn has_mta(&self) -> bool {
        matches!(
            self,
            Variant::BaseNetMta
                | Variant::BaseNetMtaConv
                | Variant::GocNetSingle
                | Variant::GocNetDual
                | Variant::GocNetDualMta
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::BaseNet => "basenet",
            Variant::TpBaseNet => "tp-basenet",
            Variant::BaseNetMta => "basenet-mta",
            Variant::BaseNetMtaConv => "basenet-mta-conv",
            Variant::GocNetSingle => "gocnet-single",
            Variant::GocNetDual => "gocnet-dual",
            Variant::GocNetDualPlain => "gocnet-dual-plain",
            Variant::GocNetDualTp => "gocnet-dual-tp",
            Variant::GocNetDualMta => "gocnet-dual-mta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!(
                    "unknown model variant {s:?}; valid variants: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Desk-scale: 3x3 stem, stages from `mini_channels`, 64x64 inputs.
    Mini,
    /// Standard layout: 7x7/2 stem plus max pool, stages 64-128-256-512,
    /// 299x299 inputs.
    Resnet18,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub backbone: BackboneKind,
    /// Stage widths for the mini backbone.
    pub mini_channels: Vec<usize>,
    pub tp: TPConfig,
    pub mta: MTAConfig,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::GocNetDual,
            backbone: BackboneKind::Mini,
            mini_channels: vec![16, 32, 64, 128],
            tp: TPConfig::default(),
            mta: MTAConfig::default(),
            num_classes: 2,
            seed: 7,
        }
    }
}

impl ModelSpec {
    pub fn stage_channels(&self) -> Vec<usize> {
        match self.backbone {
            BackboneKind::Mini => self.mini_channels.clone(),
            BackboneKind::Resnet18 => vec![64, 128, 256, 512],
        }
    }

    /// The image side length the standard configs assume.
    pub fn default_input_size(&self) -> usize {
        match self.backbone {
            BackboneKind::Mini => 64,
            BackboneKind::Resnet18 => 299,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "binary classifier only: num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if matches!(self.backbone, BackboneKind::Mini) && self.mini_channels.is_empty() {
            return Err(Error::Config("mini backbone needs at least one stage".into()));
        }
        Ok(())
    }
}

/// Conv + batch norm pair (backbone convs carry no bias; the norm's shift
/// plays that role).
struct ConvBn<E: Element> {
    weight: Tensor<E>,
    scale: Tensor<E>,
    shift: Tensor<E>,
    running_mean: Tensor<E>,
    running_var: Tensor<E>,
    stride: usize,
    padding: PaddingMode,
}

impl<E: Element> ConvBn<E> {
    fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        x.conv2d(&self.weight, None, self.stride, self.padding, 1)?
            .batch_norm(
                &self.scale,
                &self.shift,
                &self.running_mean,
                &self.running_var,
                mode,
                E::from_f64(BN_MOMENTUM),
                E::from_f64(BN_EPSILON),
            )
    }
}

pub struct BasicBlock<E: Element> {
    name: String,
    conv1: ConvBn<E>,
    conv2: ConvBn<E>,
    downsample: Option<ConvBn<E>>,
    attention: Option<MTAState<E>>,
}

impl<E: Element> BasicBlock<E> {
    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let mut branch = self.conv1.forward(x, mode)?.relu()?;
        branch = self.conv2.forward(&branch, mode)?;
        if let Some(att) = &self.attention {
            branch = mta_forward(&branch, att)?;
        }
        let shortcut = match &self.downsample {
            Some(ds) => ds.forward(x, mode)?,
            None => x.clone(),
        };
        if branch.dims() != shortcut.dims() {
            return Err(Error::shape(
                "basic_block",
                format!(
                    "residual add mismatch in {}: branch {} vs shortcut {}",
                    self.name,
                    branch.dims(),
                    shortcut.dims()
                ),
            ));
        }
        branch.add(&shortcut)?.relu()
    }
}

pub struct Backbone<E: Element> {
    stem: ConvBn<E>,
    stem_pool: bool,
    stages: Vec<Vec<BasicBlock<E>>>,
    out_features: usize,
}

impl<E: Element> Backbone<E> {
    /// Runs the backbone and global-average-pools to a `(n, d, 1, 1)`
    /// feature vector.
    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let mut out = self.stem.forward(x, mode)?.relu()?;
        if self.stem_pool {
            out = out.max_pool2d(3, 2)?;
        }
        for stage in &self.stages {
            for block in stage {
                out = block.forward(&out, mode)?;
            }
        }
        out.global_avg_pool()
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }
}

/// Registers parameters under hierarchical names while drawing init values
/// from one seeded stream in build order.
struct Builder<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    rng: ChaCha8Rng,
}

impl<'a, E: Element> Builder<'a, E> {
    fn conv_weight(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> Result<Tensor<E>> {
        let t = init::he_normal(Dims::new(out_c, in_c, k, k), in_c * k * k, &mut self.rng);
        self.store.register(name, t, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        prefix: &str,
        conv_name: &str,
        bn_name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: PaddingMode,
    ) -> Result<ConvBn<E>> {
        let weight = self.conv_weight(&format!("{prefix}{conv_name}.weight"), out_c, in_c, k)?;
        let cdims = Dims::new(1, out_c, 1, 1);
        let scale = self.store.register(
            &format!("{prefix}{bn_name}.scale"),
            init::constant_grad(cdims, 1.0),
            true,
        )?;
        let shift = self.store.register(
            &format!("{prefix}{bn_name}.shift"),
            init::constant_grad(cdims, 0.0),
            true,
        )?;
        let running_mean = self.store.register(
            &format!("{prefix}{bn_name}.running_mean"),
            init::constant(cdims, 0.0),
            false,
        )?;
        let running_var = self.store.register(
            &format!("{prefix}{bn_name}.running_var"),
            init::constant(cdims, 1.0),
            false,
        )?;
        Ok(ConvBn {
            weight,
            scale,
            shift,
            running_mean,
            running_var,
            stride,
            padding,
        })
    }

    fn mta_state(
        &mut self,
        prefix: &str,
        config: MTAConfig,
        learnable_mt: bool,
    ) -> Result<MTAState<E>> {
        let mut state = MTAState::new(config, &mut self.rng)?;
        state.fc1_weight =
            self.store
                .register(&format!("{prefix}mta.fc1.weight"), state.fc1_weight, true)?;
        state.fc1_bias = self
            .store
            .register(&format!("{prefix}mta.fc1.bias"), state.fc1_bias, true)?;
        state.fc2_weight =
            self.store
                .register(&format!("{prefix}mta.fc2.weight"), state.fc2_weight, true)?;
        state.fc2_bias = self
            .store
            .register(&format!("{prefix}mta.fc2.bias"), state.fc2_bias, true)?;
        state.alpha = self
            .store
            .register(&format!("{prefix}mta.alpha"), state.alpha, true)?;
        if learnable_mt {
            // The plain-conv ablation: same shape as the trace gate, but
            // trained like any other conv.
            let dims = state.mt_weight.dims();
            let w = init::he_normal(dims, dims.c * 9, &mut self.rng);
            state.mt_weight = self
                .store
                .register(&format!("{prefix}mta.mt_conv.weight"), w, true)?;
            state.mt_aux_weight = None;
        } else {
            state.mt_weight =
                self.store
                    .register(&format!("{prefix}mta.mt_kernel"), state.mt_weight, false)?;
            if let Some(aux) = state.mt_aux_weight.take() {
                state.mt_aux_weight = Some(self.store.register(
                    &format!("{prefix}mta.mt_kernel_aux"),
                    aux,
                    false,
                )?);
            }
        }
        Ok(state)
    }

    fn basic_block(
        &mut self,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        mta: Option<&MTAConfig>,
        learnable_mt: bool,
    ) -> Result<BasicBlock<E>> {
        let conv1 = self.conv_bn(prefix, "conv1", "bn1", in_c, out_c, 3, stride, PaddingMode::Zero(1))?;
        let conv2 = self.conv_bn(prefix, "conv2", "bn2", out_c, out_c, 3, 1, PaddingMode::Zero(1))?;
        let downsample = if stride != 1 || in_c != out_c {
            Some(self.conv_bn(
                prefix,
                "downsample.conv",
                "downsample.bn",
                in_c,
                out_c,
                1,
                stride,
                PaddingMode::Zero(0),
            )?)
        } else {
            None
        };
        let attention = match mta {
            Some(cfg) => Some(self.mta_state(prefix, cfg.for_channels(out_c), learnable_mt)?),
            None => None,
        };
        Ok(BasicBlock {
            name: prefix.trim_end_matches('.').to_string(),
            conv1,
            conv2,
            downsample,
            attention,
        })
    }

    fn backbone(
        &mut self,
        prefix: &str,
        kind: BackboneKind,
        in_channels: usize,
        stage_channels: &[usize],
        mta: Option<&MTAConfig>,
        learnable_mt: bool,
    ) -> Result<Backbone<E>> {
        let c0 = stage_channels[0];
        let (stem, stem_pool) = match kind {
            BackboneKind::Mini => (
                self.conv_bn(
                    prefix,
                    "stem.conv",
                    "stem.bn",
                    in_channels,
                    c0,
                    3,
                    1,
                    PaddingMode::Zero(1),
                )?,
                false,
            ),
            BackboneKind::Resnet18 => (
                self.conv_bn(
                    prefix,
                    "stem.conv",
                    "stem.bn",
                    in_channels,
                    c0,
                    7,
                    2,
                    PaddingMode::Zero(3),
                )?,
                true,
            ),
        };
        let mut stages = Vec::new();
        let mut in_c = c0;
        for (si, &out_c) in stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..BLOCKS_PER_STAGE {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let block_prefix = format!("{prefix}stage{}.block{}.", si + 1, bi + 1);
                blocks.push(self.basic_block(&block_prefix, in_c, out_c, stride, mta, learnable_mt)?);
                in_c = out_c;
            }
            stages.push(blocks);
        }
        Ok(Backbone {
            stem,
            stem_pool,
            stages,
            out_features: in_c,
        })
    }

    fn tp_layer(&mut self, prefix: &str, channels: usize, config: TPConfig) -> Result<TpLayer<E>> {
        let mut layer = TpLayer::new(channels, config)?;
        layer.weight = self
            .store
            .register(&format!("{prefix}tp.weight"), layer.weight, false)?;
        if let Some(aux) = layer.aux_weight.take() {
            layer.aux_weight =
                Some(self.store
                    .register(&format!("{prefix}tp.weight_aux"), aux, false)?);
        }
        Ok(layer)
    }
}

pub struct Model<E: Element = f32> {
    pub spec: ModelSpec,
    tp: Option<TpLayer<E>>,
    stream1: Option<Backbone<E>>,
    stream2: Option<Backbone<E>>,
    fc_weight: Tensor<E>,
    fc_bias: Tensor<E>,
}

/// Builds a model and its parameter store. Initialization is a pure function
/// of the spec seed: convolution weights are He-normal, batch-norm scale and
/// shift start at 1 and 0, biases at zero, and the fixed gradient kernels
/// are registered with `trainable = false`.
pub fn build<E: Element>(spec: &ModelSpec) -> Result<(Model<E>, ParamStore<E>)> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut builder = Builder {
        store: &mut store,
        rng: substream(spec.seed, "init"),
    };
    let stage_channels = spec.stage_channels();
    let image_channels = 3usize;
    let variant = spec.variant;

    let (tp, stream1, stream2) = if variant.is_dual() {
        let tp = if variant.has_tp() {
            Some(builder.tp_layer("stream1.", image_channels, spec.tp)?)
        } else {
            None
        };
        let s1_in = tp.as_ref().map_or(image_channels, |t| t.out_channels());
        let s1 = builder.backbone("stream1.", spec.backbone, s1_in, &stage_channels, None, false)?;
        let mta = variant.has_mta().then_some(&spec.mta);
        let s2 = builder.backbone(
            "stream2.",
            spec.backbone,
            image_channels,
            &stage_channels,
            mta,
            false,
        )?;
        (tp, Some(s1), Some(s2))
    } else {
        let tp = if variant.has_tp() {
            Some(builder.tp_layer("", image_channels, spec.tp)?)
        } else {
            None
        };
        let in_c = tp.as_ref().map_or(image_channels, |t| t.out_channels());
        let mta = variant.has_mta().then_some(&spec.mta);
        let learnable_mt = variant == Variant::BaseNetMtaConv;
        let backbone = builder.backbone(
            "backbone.",
            spec.backbone,
            in_c,
            &stage_channels,
            mta,
            learnable_mt,
        )?;
        (tp, Some(backbone), None)
    };

    let d = stage_channels.last().copied().expect("validated non-empty");
    let fc_weight = {
        let t = init::he_normal(Dims::new(spec.num_classes, d, 1, 1), d, &mut builder.rng);
        builder.store.register("fc.weight", t, true)?
    };
    let fc_bias = builder.store.register(
        "fc.bias",
        init::constant_grad(Dims::new(1, spec.num_classes, 1, 1), 0.0),
        true,
    )?;

    Ok((
        Model {
            spec: spec.clone(),
            tp,
            stream1,
            stream2,
            fc_weight,
            fc_bias,
        },
        store,
    ))
}

impl<E: Element> Model<E> {
    /// Pooled feature vectors per stream, before fusion.
    pub fn stream_features(
        &self,
        input: &Tensor<E>,
        mode: Mode,
    ) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
        let s1 = self.stream1.as_ref().expect("stream1 always built");
        let x1 = match &self.tp {
            Some(tp) => tp.forward(input)?,
            None => input.clone(),
        };
        let f1 = s1.forward(&x1, mode)?;
        let f2 = match &self.stream2 {
            Some(s2) => Some(s2.forward(input, mode)?),
            None => None,
        };
        Ok((f1, f2))
    }

    /// Classifies fused features (`(n, d, 1, 1)` pooled vectors).
    pub fn classify(&self, features: &Tensor<E>) -> Result<Tensor<E>> {
        features.linear(&self.fc_weight, Some(&self.fc_bias))
    }

    /// Full forward pass to `(n, num_classes)` logits.
    pub fn forward(&self, input: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let (f1, f2) = self.stream_features(input, mode)?;
        let fused = match f2 {
            Some(f2) => f1.add(&f2)?,
            None => f1,
        };
        self.classify(&fused)
    }

    pub fn feature_width(&self) -> usize {
        self.stream1
            .as_ref()
            .expect("stream1 always built")
            .out_features()
    }
}

/// One row of the parameter ledger.
#[derive(Debug, Clone)]
pub struct LedgerRow {
    pub name: String,
    pub dims: Dims,
    pub count: usize,
    pub trainable: bool,
    /// First 3x3 grid of a fixed kernel entry, for registry comparison.
    pub kernel_preview: Option<[f32; 9]>,
}

pub fn ledger<E: Element>(store: &ParamStore<E>) -> Vec<LedgerRow> {
    store
        .iter()
        .map(|(name, entry)| {
            let dims = entry.tensor.dims();
            let kernel_preview = if !entry.trainable && dims.h == 3 && dims.w == 3 {
                let data = entry.tensor.data();
                let mut grid = [0.0f32; 9];
                for (g, v) in grid.iter_mut().zip(data.iter()) {
                    *g = v.to_f64() as f32;
                }
                Some(grid)
            } else {
                None
            };
            LedgerRow {
                name: name.clone(),
                dims,
                count: dims.count(),
                trainable: entry.trainable,
                kernel_preview,
            }
        })
        .collect()
}

/// The `inspect` text format: one row per parameter plus totals.
pub fn format_ledger<E: Element>(store: &ParamStore<E>) -> String {
    use std::fmt::Write;
    let rows = ledger(store);
    let mut out = String::new();
    let name_width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let _ = writeln!(
        out,
        "{:<name_width$}  {:>14}  {:>9}  {:<9}",
        "name", "dims", "count", "flags"
    );
    for row in &rows {
        let dims = format!("{}x{}x{}x{}", row.dims.n, row.dims.c, row.dims.h, row.dims.w);
        let flags = if row.trainable { "trainable" } else { "fixed" };
        let _ = write!(
            out,
            "{:<name_width$}  {:>14}  {:>9}  {:<9}",
            row.name, dims, row.count, flags
        );
        if let Some(grid) = &row.kernel_preview {
            let _ = write!(
                out,
                "  kernel=[{} {} {}; {} {} {}; {} {} {}]",
                grid[0], grid[1], grid[2], grid[3], grid[4], grid[5], grid[6], grid[7], grid[8]
            );
        }
        let _ = writeln!(out);
    }
    let total: usize = rows.iter().map(|r| r.count).sum();
    let trainable: usize = rows.iter().filter(|r| r.trainable).map(|r| r.count).sum();
    let _ = writeln!(out, "total parameters: {total}");
    let _ = writeln!(out, "trainable parameters: {trainable}");
    let _ = writeln!(out, "fixed parameters: {}", total - trainable);
    out
}
