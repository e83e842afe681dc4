use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{ConvGeom, Scalar};
use crate::error::{Error, Result};
use crate::rng;

/// Network topology: four encoder levels (the last three downsample by 2),
/// a mask attention block before each of three upsampling decoder stages,
/// and two sigmoid heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Channel width of each encoder level; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Feed the mask to the encoder as an extra input channel.
    pub mask_input: bool,
}

pub const ENCODER_LEVELS: usize = 4;
pub const DECODER_STAGES: usize = 3;

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            in_channels: 3,
            widths: vec![32, 64, 128, 256],
            leaky_slope: 0.2,
            mask_input: true,
        }
    }
}

impl ArchConfig {
    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != ENCODER_LEVELS {
            return Err(Error::InvalidArch(format!(
                "expected {ENCODER_LEVELS} encoder levels, got {}",
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::InvalidArch("zero channel width".into()));
        }
        let factor = 1 << (ENCODER_LEVELS - 1);
        if self.height == 0
            || self.width == 0
            || self.height % factor != 0
            || self.width % factor != 0
        {
            return Err(Error::InvalidArch(format!(
                "resolution {}x{} must be a positive multiple of {factor}",
                self.height, self.width
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidArch(format!(
                "leaky slope {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Spatial size of decoder stage `s` (0-based) input.
    pub fn stage_dims(&self, s: usize) -> (usize, usize) {
        let f = 1 << (ENCODER_LEVELS - 1 - s);
        (self.height / f, self.width / f)
    }

    fn level_dims(&self, l: usize) -> (usize, usize) {
        (self.height >> l, self.width >> l)
    }

    /// Every convolution of the network, in parameter order.
    pub(crate) fn convs(&self) -> Vec<ConvSpec> {
        let w = &self.widths;
        let mut v = Vec::with_capacity(15);
        let input = self.in_channels + self.mask_input as usize;
        for l in 0..ENCODER_LEVELS {
            // Input of level l lives at the resolution of level l - 1.
            let (h, ww) = self.level_dims(l.saturating_sub(1));
            let (cin, stride) = if l == 0 { (input, 1) } else { (w[l - 1], 2) };
            v.push(ConvSpec::new(
                format!("enc{l}"),
                cin,
                w[l],
                3,
                stride,
                h,
                ww,
                true,
            ));
        }
        for s in 0..DECODER_STAGES {
            let c = w[ENCODER_LEVELS - 1 - s];
            let skip = w[ENCODER_LEVELS - 2 - s];
            let (h, ww) = self.stage_dims(s);
            v.push(ConvSpec::new(
                format!("mam{}.conv_a", s + 1),
                c + 1,
                c,
                3,
                1,
                h,
                ww,
                true,
            ));
            v.push(ConvSpec::new(
                format!("mam{}.conv_b", s + 1),
                c,
                c,
                3,
                1,
                h,
                ww,
                false,
            ));
            v.push(ConvSpec::new(
                format!("dec{}", s + 1),
                c + skip,
                skip,
                3,
                1,
                h * 2,
                ww * 2,
                true,
            ));
        }
        let (h, ww) = self.level_dims(0);
        v.push(ConvSpec::new(
            "head.image".into(),
            w[0],
            self.in_channels,
            1,
            1,
            h,
            ww,
            false,
        ));
        v.push(ConvSpec::new(
            "head.mask".into(),
            w[0],
            1,
            1,
            1,
            h,
            ww,
            false,
        ));
        v
    }
}

pub(crate) const CONV_HEAD_IMAGE: usize = ENCODER_LEVELS + 3 * DECODER_STAGES;
pub(crate) const CONV_HEAD_MASK: usize = CONV_HEAD_IMAGE + 1;

pub(crate) fn conv_mam_a(s: usize) -> usize {
    ENCODER_LEVELS + 3 * s
}

pub(crate) fn conv_mam_b(s: usize) -> usize {
    ENCODER_LEVELS + 3 * s + 1
}

pub(crate) fn conv_dec(s: usize) -> usize {
    ENCODER_LEVELS + 3 * s + 2
}

#[derive(Clone, Debug)]
pub(crate) struct ConvSpec {
    pub name: String,
    pub geom: ConvGeom,
    /// Followed by a leaky ReLU (drives the init gain).
    pub activated: bool,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        h: usize,
        w: usize,
        activated: bool,
    ) -> Self {
        Self {
            name,
            geom: ConvGeom {
                cin,
                cout,
                k,
                stride,
                pad: k / 2,
                h,
                w,
            },
            activated,
        }
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> ParamTensor<T> {
    /// Convolution kernels decay; biases do not.
    pub fn decays(&self) -> bool {
        self.name.ends_with(".weight")
    }
}

/// All learnable weights. Gradients use the same type, so a gradient is
/// congruent to the parameters it belongs to by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Variance-scaled normal initialization, deterministic per seed:
    /// He gain for activated convolutions, unit gain otherwise; zero biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let slope = arch.leaky_slope;
        let mut tensors = Vec::new();
        for (i, spec) in arch.convs().into_iter().enumerate() {
            let g = spec.geom;
            let fan_in = g.patch_len() as f64;
            let gain = if spec.activated {
                (2.0 / (1.0 + slope * slope)).sqrt()
            } else {
                1.0
            };
            let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid std");
            let mut rng = rng::stream(seed, &[0x1417, i as u64]);
            let weight = (0..g.cout * g.patch_len())
                .map(|_| T::of(normal.sample(&mut rng)))
                .collect();
            tensors.push(ParamTensor {
                name: format!("{}.weight", spec.name),
                shape: vec![g.cout, g.cin, g.k, g.k],
                data: weight,
            });
            tensors.push(ParamTensor {
                name: format!("{}.bias", spec.name),
                shape: vec![g.cout],
                data: vec![T::zero(); g.cout],
            });
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn weight(&self, conv: usize) -> &[T] {
        &self.tensors[2 * conv].data
    }

    pub(crate) fn bias(&self, conv: usize) -> &[T] {
        &self.tensors[2 * conv + 1].data
    }

    pub(crate) fn weight_bias_mut(&mut self, conv: usize) -> (&mut [T], &mut [T]) {
        let (w, b) = self.tensors[2 * conv..2 * conv + 2].split_at_mut(1);
        (&mut w[0].data, &mut b[0].data)
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &ModelParams<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Checks tensor names and shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        let expected = Self::layout(&self.arch)?;
        if expected.len() != self.tensors.len() {
            return Err(Error::InvalidArch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name
                || *shape != t.shape
                || t.data.len() != shape.iter().product::<usize>()
            {
                return Err(Error::InvalidArch(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        Ok(())
    }

    /// `(name, shape)` of every tensor for an architecture.
    pub fn layout(arch: &ArchConfig) -> Result<Vec<(String, Vec<usize>)>> {
        arch.validate()?;
        Ok(arch
            .convs()
            .into_iter()
            .flat_map(|s| {
                let g = s.geom;
                [
                    (format!("{}.weight", s.name), vec![g.cout, g.cin, g.k, g.k]),
                    (format!("{}.bias", s.name), vec![g.cout]),
                ]
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig::default()
            .with_resolution(16, 16)
            .with_widths(vec![2, 3, 4, 5])
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelParams::<f32>::init(&tiny(), 3).unwrap();
        let b = ModelParams::<f32>::init(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_ne!(a, ModelParams::<f32>::init(&tiny(), 4).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn arch_validation() {
        assert!(tiny().with_widths(vec![2, 3, 4]).validate().is_err());
        assert!(tiny().with_resolution(20, 16).validate().is_err());
        assert!(ModelParams::<f64>::init(&tiny().with_resolution(12, 12), 0).is_err());
    }

    #[test]
    fn decay_split_is_weights_only() {
        let p = ModelParams::<f32>::init(&tiny(), 0).unwrap();
        let decayed: Vec<_> = p.tensors.iter().filter(|t| t.decays()).collect();
        assert_eq!(decayed.len(), p.tensors.len() / 2);
        assert!(decayed.iter().all(|t| t.shape.len() == 4));
        assert!(p
            .tensors
            .iter()
            .filter(|t| !t.decays())
            .all(|t| t.shape.len() == 1));
    }

    #[test]
    fn stage_dims_follow_levels() {
        let a = ArchConfig::default().with_resolution(64, 32);
        assert_eq!(a.stage_dims(0), (8, 4));
        assert_eq!(a.stage_dims(1), (16, 8));
        assert_eq!(a.stage_dims(2), (32, 16));
    }
}
