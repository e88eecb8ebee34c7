//! The nine classical gradient operators and the tensor pre-processing (TP)
//! stage built on them.
//!
//! Each operator is an immutable 3x3 coefficient grid applied as a
//! fixed-weight convolution (cross-correlation, replicate padding by
//! default). The Roberts sharpening entry is the one irregular case: it is a
//! cross pair embedded at the grid center, with the two responses combined
//! as |gx| + |gy|, so it is the only non-linear operator in the menu.

use std::sync::LazyLock;

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Dims, Element, PaddingMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorName {
    Highpass,
    RobertsSharpen,
    Kirsch,
    Laplacian,
    SobelH,
    SobelV,
    PrewittH,
    PrewittV,
    PrewittD,
}

impl OperatorName {
    pub const ALL: [OperatorName; 9] = [
        OperatorName::Highpass,
        OperatorName::RobertsSharpen,
        OperatorName::Kirsch,
        OperatorName::Laplacian,
        OperatorName::SobelH,
        OperatorName::SobelV,
        OperatorName::PrewittH,
        OperatorName::PrewittV,
        OperatorName::PrewittD,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OperatorName::Highpass => "highpass",
            OperatorName::RobertsSharpen => "roberts-sharpen",
            OperatorName::Kirsch => "kirsch",
            OperatorName::Laplacian => "laplacian",
            OperatorName::SobelH => "sobel-h",
            OperatorName::SobelV => "sobel-v",
            OperatorName::PrewittH => "prewitt-h",
            OperatorName::PrewittV => "prewitt-v",
            OperatorName::PrewittD => "prewitt-d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|op| op.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|op| op.as_str()).collect();
                Error::Config(format!(
                    "unknown operator {s:?}; valid operators: {}",
                    valid.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for OperatorName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An immutable named 3x3 kernel from the operator menu.
#[derive(Debug, Clone)]
pub struct GradientKernel {
    name: OperatorName,
    coeffs: [[f32; 3]; 3],
    /// Second grid of the Roberts cross pair; `None` for every linear
    /// operator.
    aux: Option<[[f32; 3]; 3]>,
    zero_sum: bool,
}

fn grid_sum(grid: &[[f32; 3]; 3]) -> f64 {
    grid.iter().flatten().map(|&v| v as f64).sum()
}

impl GradientKernel {
    fn new(name: OperatorName, coeffs: [[f32; 3]; 3], aux: Option<[[f32; 3]; 3]>) -> Self {
        let zero_sum =
            grid_sum(&coeffs).abs() < 1e-9 && aux.map_or(true, |a| grid_sum(&a).abs() < 1e-9);
        GradientKernel {
            name,
            coeffs,
            aux,
            zero_sum,
        }
    }

    pub fn name(&self) -> OperatorName {
        self.name
    }

    pub fn coeffs(&self) -> &[[f32; 3]; 3] {
        &self.coeffs
    }

    pub fn aux(&self) -> Option<&[[f32; 3]; 3]> {
        self.aux.as_ref()
    }

    pub fn zero_sum(&self) -> bool {
        self.zero_sum
    }

    fn grid_tensor<E: Element>(grid: &[[f32; 3]; 3], dims: Dims, repeat: usize) -> Tensor<E> {
        let flat: Vec<E> = grid
            .iter()
            .flatten()
            .map(|&v| E::from_f64(v as f64))
            .collect();
        let mut data = Vec::with_capacity(repeat * 9);
        for _ in 0..repeat {
            data.extend_from_slice(&flat);
        }
        Tensor::from_vec(dims, data).expect("kernel tensor")
    }

    /// Depthwise weight `(channels, 1, 3, 3)`: every channel filtered by the
    /// same grid, `groups = channels`.
    pub fn depthwise_weight<E: Element>(&self, channels: usize) -> Tensor<E> {
        Self::grid_tensor(&self.coeffs, Dims::new(channels, 1, 3, 3), channels)
    }

    pub fn depthwise_aux_weight<E: Element>(&self, channels: usize) -> Option<Tensor<E>> {
        self.aux
            .as_ref()
            .map(|a| Self::grid_tensor(a, Dims::new(channels, 1, 3, 3), channels))
    }

    /// Summed-single weight `(1, channels, 3, 3)`: one output channel equal
    /// to the sum of the per-channel responses.
    pub fn summed_weight<E: Element>(&self, channels: usize) -> Tensor<E> {
        Self::grid_tensor(&self.coeffs, Dims::new(1, channels, 3, 3), channels)
    }

    pub fn summed_aux_weight<E: Element>(&self, channels: usize) -> Option<Tensor<E>> {
        self.aux
            .as_ref()
            .map(|a| Self::grid_tensor(a, Dims::new(1, channels, 3, 3), channels))
    }
}

static REGISTRY: LazyLock<[GradientKernel; 9]> = LazyLock::new(|| {
    [
        GradientKernel::new(
            OperatorName::Highpass,
            [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]],
            None,
        ),
        GradientKernel::new(
            OperatorName::RobertsSharpen,
            [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
            Some([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]),
        ),
        GradientKernel::new(
            OperatorName::Kirsch,
            [[-3.0, -3.0, 5.0], [-3.0, 0.0, 5.0], [-3.0, -3.0, 5.0]],
            None,
        ),
        GradientKernel::new(
            OperatorName::Laplacian,
            [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]],
            None,
        ),
        GradientKernel::new(
            OperatorName::SobelH,
            [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
            None,
        ),
        GradientKernel::new(
            OperatorName::SobelV,
            [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
            None,
        ),
        GradientKernel::new(
            OperatorName::PrewittH,
            [[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]],
            None,
        ),
        GradientKernel::new(
            OperatorName::PrewittV,
            [[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
            None,
        ),
        GradientKernel::new(
            OperatorName::PrewittD,
            [[0.0, 1.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, -1.0, 0.0]],
            None,
        ),
    ]
});

/// All nine operators, write-once.
pub fn kernel_registry() -> &'static [GradientKernel; 9] {
    &REGISTRY
}

pub fn kernel(name: OperatorName) -> &'static GradientKernel {
    REGISTRY
        .iter()
        .find(|k| k.name == name)
        .expect("registry covers every operator")
}

/// How the channel sum of the refinement equation is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TPMode {
    /// Filter each channel independently; output keeps the input's channel
    /// count. Default: a multi-channel map is what the backbone stem wants.
    Depthwise,
    /// The literal per-channel sum: one output channel.
    SummedSingle,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TPConfig {
    pub operator: OperatorName,
    pub mode: TPMode,
    pub padding: PaddingMode,
}

impl Default for TPConfig {
    fn default() -> Self {
        TPConfig {
            operator: OperatorName::PrewittD,
            mode: TPMode::Depthwise,
            padding: PaddingMode::Replicate(1),
        }
    }
}

/// Applies a fixed-kernel response: plain convolution for linear operators,
/// |gx| + |gy| for the Roberts pair.
pub fn fixed_response<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    aux: Option<&Tensor<E>>,
    padding: PaddingMode,
    groups: usize,
) -> Result<Tensor<E>> {
    match aux {
        None => input.conv2d(weight, None, 1, padding, groups),
        Some(a) => {
            let gx = input.conv2d(weight, None, 1, padding, groups)?.abs()?;
            let gy = input.conv2d(a, None, 1, padding, groups)?.abs()?;
            gx.add(&gy)
        }
    }
}

/// The TP stage as a layer: fixed weight tensors built once, so a network
/// can register them (trainable = false) and the contract checks can compare
/// them against the registry bit-for-bit.
pub struct TpLayer<E: Element> {
    pub config: TPConfig,
    pub weight: Tensor<E>,
    pub aux_weight: Option<Tensor<E>>,
    channels: usize,
}

impl<E: Element> TpLayer<E> {
    pub fn new(channels: usize, config: TPConfig) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("TP requires at least one channel".into()));
        }
        let k = kernel(config.operator);
        let (weight, aux_weight) = match config.mode {
            TPMode::Depthwise => (
                k.depthwise_weight::<E>(channels),
                k.depthwise_aux_weight::<E>(channels),
            ),
            TPMode::SummedSingle => (
                k.summed_weight::<E>(channels),
                k.summed_aux_weight::<E>(channels),
            ),
        };
        Ok(TpLayer {
            config,
            weight,
            aux_weight,
            channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        match self.config.mode {
            TPMode::Depthwise => self.channels,
            TPMode::SummedSingle => 1,
        }
    }

    pub fn forward(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        if input.dims().c != self.channels {
            return Err(Error::shape(
                "tp_apply",
                format!(
                    "input {} does not match configured channels {}",
                    input.dims(),
                    self.channels
                ),
            ));
        }
        let groups = match self.config.mode {
            TPMode::Depthwise => self.channels,
            TPMode::SummedSingle => 1,
        };
        fixed_response(
            input,
            &self.weight,
            self.aux_weight.as_ref(),
            self.config.padding,
            groups,
        )
    }
}

/// One-shot TP refinement of an input tensor.
pub fn tp_apply<E: Element>(input: &Tensor<E>, config: &TPConfig) -> Result<Tensor<E>> {
    TpLayer::new(input.dims().c, *config)?.forward(input)
}

/// Per-channel |response|, min-max normalized to `[0, 255]`.
///
/// Input is a decoded `(1, 3, h, w)` image in `[0, 1]`; output is the
/// visualization image. An all-constant input produces all zeros.
pub fn trace_image(input: &Tensor<f32>, operator: OperatorName) -> Result<image::RgbImage> {
    let d = input.dims();
    if d.n != 1 || d.c != 3 {
        return Err(Error::shape(
            "trace_image",
            format!("expected a (1, 3, h, w) decoded image, got {d}"),
        ));
    }
    let config = TPConfig {
        operator,
        ..TPConfig::default()
    };
    let response = no_grad(|| tp_apply(input, &config))?.abs()?;
    let data = response.data();
    let spatial = d.spatial();
    let mut normalized = vec![0u8; 3 * spatial];
    for c in 0..3 {
        let plane = &data[c * spatial..(c + 1) * spatial];
        let min = plane.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let range = max - min;
        if range > 0.0 {
            for (i, &v) in plane.iter().enumerate() {
                normalized[c * spatial + i] = (((v - min) / range) * 255.0).round() as u8;
            }
        }
    }
    let mut img = image::RgbImage::new(d.w as u32, d.h as u32);
    for y in 0..d.h {
        for x in 0..d.w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    normalized[y * d.w + x],
                    normalized[spatial + y * d.w + x],
                    normalized[2 * spatial + y * d.w + x],
                ]),
            );
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    fn ramp_x(c: usize, h: usize, w: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for _ in 0..h {
                for x in 0..w {
                    data.push(x as f32);
                }
            }
        }
        Tensor::from_vec(Dims::new(1, c, h, w), data).unwrap()
    }

    fn ramp_y(c: usize, h: usize, w: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for y in 0..h {
                for _ in 0..w {
                    data.push(y as f32);
                }
            }
        }
        Tensor::from_vec(Dims::new(1, c, h, w), data).unwrap()
    }

    #[test]
    fn registry_has_nine_consistent_entries() {
        let reg = kernel_registry();
        assert_eq!(reg.len(), 9);
        for (i, name) in OperatorName::ALL.iter().enumerate() {
            assert_eq!(reg[i].name(), *name);
        }
        for k in reg.iter() {
            let sum = grid_sum(k.coeffs());
            assert_eq!(k.zero_sum(), sum.abs() < 1e-9, "{}", k.name());
        }
    }

    #[test]
    fn prewitt_coefficients() {
        let h = kernel(OperatorName::PrewittH);
        assert_eq!(
            h.coeffs(),
            &[[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]]
        );
        let v = kernel(OperatorName::PrewittV);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(v.coeffs()[i][j], h.coeffs()[j][i], "transpose at {i},{j}");
            }
        }
    }

    #[test]
    fn laplacian_coefficients_and_zero_sum() {
        let k = kernel(OperatorName::Laplacian);
        assert_eq!(
            k.coeffs(),
            &[[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]
        );
        assert!(k.zero_sum());
        // Zero response to constant input and to a linear ramp (interior).
        let flat = Tensor::<f32>::full(Dims::new(1, 1, 6, 6), 0.7).unwrap();
        let cfg = TPConfig {
            operator: OperatorName::Laplacian,
            ..Default::default()
        };
        let r = tp_apply(&flat, &cfg).unwrap();
        assert!(r.to_vec().iter().all(|&v| v == 0.0));
        let r = tp_apply(&ramp_x(1, 6, 6), &cfg).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(r.get(0, 0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn constant_input_zero_response_for_all_operators() {
        // Dyadic constant: every coefficient product is exact, so the
        // zero-sum cancellation is exact too.
        let x = Tensor::<f32>::full(Dims::new(1, 3, 8, 8), 0.5).unwrap();
        for name in OperatorName::ALL {
            let config = TPConfig {
                operator: name,
                ..Default::default()
            };
            let y = tp_apply(&x, &config).unwrap();
            assert!(
                y.to_vec().iter().all(|&v| v == 0.0),
                "{name} should vanish on constants (replicate padding)"
            );
        }
    }

    #[test]
    fn prewitt_h_on_x_ramp_gives_six_in_interior() {
        let x = ramp_x(3, 8, 8);
        let config = TPConfig {
            operator: OperatorName::PrewittH,
            ..Default::default()
        };
        let y = tp_apply(&x, &config).unwrap();
        for c in 0..3 {
            for h in 1..7 {
                for w in 1..7 {
                    assert_eq!(y.get(0, c, h, w), 6.0, "c={c} h={h} w={w}");
                }
            }
        }
    }

    #[test]
    fn direction_selectivity() {
        // Horizontal-constant / vertical-ramp image: zero for Prewitt-h.
        let vertical_ramp = ramp_y(1, 8, 8);
        let y = tp_apply(
            &vertical_ramp,
            &TPConfig {
                operator: OperatorName::PrewittH,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        // Transposed image: zero for Prewitt-v.
        let horizontal_ramp = ramp_x(1, 8, 8);
        let y = tp_apply(
            &horizontal_ramp,
            &TPConfig {
                operator: OperatorName::PrewittV,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract_for_both_modes() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 3, 64, 64));
        let depthwise = tp_apply(&x, &TPConfig::default()).unwrap();
        assert_eq!(depthwise.dims(), Dims::new(1, 3, 64, 64));
        let summed = tp_apply(
            &x,
            &TPConfig {
                mode: TPMode::SummedSingle,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(summed.dims(), Dims::new(1, 1, 64, 64));
    }

    #[test]
    fn depthwise_matches_loop_oracle() {
        let mut state = 99u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
        };
        let data: Vec<f32> = (0..2 * 3 * 9 * 9).map(|_| next()).collect();
        let x = Tensor::from_vec(Dims::new(2, 3, 9, 9), data).unwrap();
        let config = TPConfig::default();
        let y = tp_apply(&x, &config).unwrap();
        let k = kernel(config.operator);
        let oracle = reference::conv2d(
            &x,
            &k.depthwise_weight::<f32>(3),
            None,
            1,
            PaddingMode::Replicate(1),
            3,
        );
        for (a, b) in y.to_vec().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn depthwise_channel_independence() {
        let base = Tensor::<f32>::full(Dims::new(1, 3, 6, 6), 0.5).unwrap();
        let mut perturbed = base.to_vec();
        // Poke channel 1 only.
        perturbed[36 + 14] += 0.25;
        let pert = Tensor::from_vec(Dims::new(1, 3, 6, 6), perturbed).unwrap();
        let config = TPConfig::default();
        let y0 = tp_apply(&base, &config).unwrap();
        let y1 = tp_apply(&pert, &config).unwrap();
        let (a, b) = (y0.to_vec(), y1.to_vec());
        for i in 0..36 {
            assert_eq!(a[i], b[i], "channel 0 untouched");
            assert_eq!(a[72 + i], b[72 + i], "channel 2 untouched");
        }
        assert_ne!(&a[36..72], &b[36..72], "channel 1 must change");
    }

    #[test]
    fn linearity_of_linear_kernels() {
        let mut state = 7u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
        };
        let xa: Vec<f32> = (0..3 * 7 * 7).map(|_| next()).collect();
        let xb: Vec<f32> = (0..3 * 7 * 7).map(|_| next()).collect();
        let (a, b) = (1.7f32, -0.6f32);
        let combined: Vec<f32> = xa.iter().zip(&xb).map(|(x, y)| a * x + b * y).collect();
        let ta = Tensor::from_vec(Dims::new(1, 3, 7, 7), xa).unwrap();
        let tb = Tensor::from_vec(Dims::new(1, 3, 7, 7), xb).unwrap();
        let tc = Tensor::from_vec(Dims::new(1, 3, 7, 7), combined).unwrap();
        for name in OperatorName::ALL {
            if name == OperatorName::RobertsSharpen {
                // |gx| + |gy| is intentionally non-linear.
                continue;
            }
            let config = TPConfig {
                operator: name,
                ..Default::default()
            };
            let ya = tp_apply(&ta, &config).unwrap().to_vec();
            let yb = tp_apply(&tb, &config).unwrap().to_vec();
            let yc = tp_apply(&tc, &config).unwrap().to_vec();
            for i in 0..yc.len() {
                assert!(
                    (yc[i] - (a * ya[i] + b * yb[i])).abs() < 1e-5,
                    "{name} not linear at {i}"
                );
            }
        }
    }

    #[test]
    fn unknown_operator_is_config_error() {
        let err = OperatorName::parse("scharr").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("prewitt-d"), "lists valid names: {msg}");
    }

    #[test]
    fn trace_image_constant_is_black_and_edge_is_bright() {
        let flat = Tensor::<f32>::full(Dims::new(1, 3, 8, 8), 0.3).unwrap();
        let img = trace_image(&flat, OperatorName::PrewittH).unwrap();
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));

        // Vertical step edge at column 4.
        let mut data = vec![0.2f32; 3 * 8 * 8];
        for c in 0..3 {
            for y in 0..8 {
                for x in 4..8 {
                    data[(c * 8 + y) * 8 + x] = 0.8;
                }
            }
        }
        let stepped = Tensor::from_vec(Dims::new(1, 3, 8, 8), data).unwrap();
        let img = trace_image(&stepped, OperatorName::PrewittH).unwrap();
        for y in 0..8 {
            assert_eq!(img.get_pixel(3, y).0, [255, 255, 255], "edge column bright");
            assert_eq!(img.get_pixel(1, y).0, [0, 0, 0], "flat region dark");
        }
    }
}
