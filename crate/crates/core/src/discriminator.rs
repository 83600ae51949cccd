//! Multi-scale patch discriminator.
//!
//! Scale `m` (counting from zero) sees the image average-pooled by `2^m` and
//! runs stride-2 4x4 convolutions `3 -> c1 -> c2 -> ... -> 1` with leaky
//! ReLU between them, producing a map of per-patch logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
/// Smallest accepted input side.
pub const MIN_INPUT: usize = 16;
/// Smallest side any scale may receive after pooling.
pub const MIN_SCALE_INPUT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub scales: usize,
    /// Hidden widths; the stack is `3 -> hidden... -> 1`.
    pub hidden: Vec<usize>,
    pub slope: f64,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            scales: 2,
            hidden: vec![64, 128],
            slope: 0.2,
        }
    }

    pub fn paper() -> Self {
        Self {
            scales: 3,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("discriminator needs at least one scale".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        Ok(())
    }

    /// Total downsampling of one scale's conv stack.
    pub fn stride_product(&self) -> usize {
        STRIDE.pow(self.hidden.len() as u32 + 1)
    }

    /// Channel chain of one scale.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![3];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

/// `(weight, bias)` per conv layer, per scale.
#[derive(Clone, Debug)]
pub struct DiscriminatorWeights {
    pub scales: Vec<Vec<(ParamId, ParamId)>>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    pub weights: DiscriminatorWeights,
}

/// `factor x factor` average pooling; factor 1 returns `x` itself.
pub fn downsample_avg(g: &Graph, x: Var, factor: usize) -> Result<Var> {
    if factor == 1 {
        return Ok(x);
    }
    if !factor.is_power_of_two() {
        return Err(Error::Config(format!(
            "downsampling factor {factor} is not a power of two"
        )));
    }
    g.avg_pool(x, factor)
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = config.widths();
        let scales = (0..config.scales)
            .map(|m| {
                widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, io)| {
                        let fan_in = (KERNEL * KERNEL * io[0]) as f64;
                        let w = store.add(
                            format!("scale{m}.conv{i}.w"),
                            Tensor::randn([KERNEL, KERNEL, io[0], io[1]], 1.0 / fan_in.sqrt(), &mut rng),
                        );
                        let b = store.add(format!("scale{m}.conv{i}.b"), Tensor::zeros([io[1]]));
                        (w, b)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            params: store,
            weights: DiscriminatorWeights { scales },
        })
    }

    /// Checks that every scale gets at least the minimum input.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::Config(format!(
                "discriminator input {h}x{w} is smaller than {MIN_INPUT}x{MIN_INPUT}"
            )));
        }
        let factor = 1 << (self.config.scales - 1);
        let (sh, sw) = (h.div_ceil(factor), w.div_ceil(factor));
        if sh < MIN_SCALE_INPUT || sw < MIN_SCALE_INPUT {
            return Err(Error::Config(format!(
                "discriminator scale {} would see {sh}x{sw}, below {MIN_SCALE_INPUT}x{MIN_SCALE_INPUT}; use fewer scales or larger images",
                self.config.scales
            )));
        }
        Ok(())
    }

    /// One logit map per scale. No sigmoid is applied.
    pub fn forward(&self, g: &Graph, p: &Bound, img: Var) -> Result<Vec<Var>> {
        let shape = g.shape(img);
        let [h, w, 3] = shape[..] else {
            return Err(Error::dim("discriminator", &shape, &[0, 0, 3]));
        };
        self.check_input(h, w)?;
        let mut maps = Vec::with_capacity(self.config.scales);
        for (m, layers) in self.weights.scales.iter().enumerate() {
            let mut x = downsample_avg(g, img, 1 << m)?;
            for (i, &(wk, bk)) in layers.iter().enumerate() {
                x = g.conv2d(x, p[wk], STRIDE, PAD)?;
                x = g.add_channel(x, p[bk])?;
                if i + 1 < layers.len() {
                    x = g.leaky_relu(x, self.config.slope);
                }
            }
            maps.push(x);
        }
        Ok(maps)
    }

    /// Logit maps of a plain tensor.
    pub fn logits(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(img.clone());
        Ok(self.forward(&g, &p, x)?.into_iter().map(|v| g.value(v)).collect())
    }
}
