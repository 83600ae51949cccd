//! Feature-space content loss, multi-scale adversarial losses and the
//! weighted total objective.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// Probabilities inside logarithms are clamped to `[EPS, 1 - EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Channel widths of the four extractor stages.
pub const EXTRACTOR_WIDTHS: [usize; 5] = [3, 8, 16, 32, 64];

/// Archive prefix of extractor weights.
pub const EXTRACTOR_PREFIX: &str = "extractor/";

/// Frozen four-stage pyramid of stride-2 3x3 convolutions with SiLU.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub params: ParamStore,
    pub stages: Vec<(ParamId, ParamId)>,
}

impl FeatureExtractor {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stages = EXTRACTOR_WIDTHS
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let std = 1.0 / ((9 * io[0]) as f64).sqrt();
                let w = params.add(
                    format!("stage{i}.w"),
                    Tensor::randn([3, 3, io[0], io[1]], std, &mut rng),
                );
                let b = params.add(format!("stage{i}.b"), Tensor::zeros([io[1]]));
                (w, b)
            })
            .collect();
        Self { params, stages }
    }

    /// Loads stage weights from an archive whose names are
    /// `extractor/stage{i}.{w,b}` with the seeded shapes.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut e = Self::seeded(0);
        let entries = checkpoint::load(path)?;
        e.params.load_from(&entries, EXTRACTOR_PREFIX)?;
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("{EXTRACTOR_PREFIX}{n}"), t))
            .collect();
        checkpoint::save(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Stage features of `img`. The weights enter as constants, so no
    /// gradient ever reaches them.
    pub fn features(&self, g: &Graph, img: Var) -> Result<Vec<Var>> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.stages.len());
        for &(w, b) in &self.stages {
            let wv = g.constant(self.params.get(w).clone());
            let bv = g.constant(self.params.get(b).clone());
            x = g.conv2d(x, wv, 2, 1)?;
            x = g.add_channel(x, bv)?;
            x = g.silu(x);
            out.push(x);
        }
        Ok(out)
    }
}

/// `sum_i mean((phi_i(content) - phi_i(stylized))^2)`; `content` is detached.
pub fn content_loss(g: &Graph, phi: &FeatureExtractor, content: Var, stylized: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(content), g.shape(stylized));
    if sa != sb {
        return Err(Error::dim("content_loss", &sa, &sb));
    }
    let fixed = g.detach(content);
    let fa = phi.features(g, fixed)?;
    let fb = phi.features(g, stylized)?;
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let d = g.sub(a, b)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("extractor has stages"))
}

/// `log(1 - sigmoid(x))` with the same clamp, via `log sigmoid(-x)`.
fn log_one_minus_sigmoid(g: &Graph, x: Var) -> Var {
    let neg = g.scale(x, -1.0);
    g.log_sigmoid_clamped(neg, PROB_EPS)
}

fn mean_over_scales(g: &Graph, terms: Vec<Var>) -> Result<Var> {
    let m = terms.len();
    if m == 0 {
        return Err(Error::Usage("adversarial loss needs at least one scale".into()));
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = g.add(sum, t)?;
    }
    Ok(g.scale(sum, 1.0 / m as f64))
}

/// `-(1/M) sum_m [mean log s(real_m) + mean log(1 - s(fake_m))]`.
pub fn adv_loss_discriminator(g: &Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::dim("adv_loss_discriminator", &[real.len()], &[fake.len()]));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let lr = g.mean(g.log_sigmoid_clamped(r, PROB_EPS));
        let lf = g.mean(log_one_minus_sigmoid(g, f));
        terms.push(g.add(lr, lf)?);
    }
    let avg = mean_over_scales(g, terms)?;
    Ok(g.scale(avg, -1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdvMode {
    /// `(1/M) sum mean log(1 - s(fake))`, minimized by the generator.
    Saturating,
    /// `-(1/M) sum mean log s(fake)`.
    #[default]
    NonSaturating,
}

impl FromStr for AdvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturating" => Ok(Self::Saturating),
            "nonsaturating" | "non-saturating" => Ok(Self::NonSaturating),
            other => Err(Error::Config(format!("unknown adversarial mode `{other}`"))),
        }
    }
}

pub fn adv_loss_generator(g: &Graph, fake: &[Var], mode: AdvMode) -> Result<Var> {
    let terms = fake
        .iter()
        .map(|&f| match mode {
            AdvMode::Saturating => g.mean(log_one_minus_sigmoid(g, f)),
            AdvMode::NonSaturating => g.mean(g.log_sigmoid_clamped(f, PROB_EPS)),
        })
        .collect();
    let avg = mean_over_scales(g, terms)?;
    Ok(match mode {
        AdvMode::Saturating => avg,
        AdvMode::NonSaturating => g.scale(avg, -1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_adv: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_adv", self.lambda_adv)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, content: f64, adv: f64) -> f64 {
        self.lambda_c * content + self.lambda_adv * adv
    }
}

pub fn total_loss(g: &Graph, content: Var, adv: Var, w: &LossWeights) -> Result<Var> {
    let c = g.scale(content, w.lambda_c);
    let a = g.scale(adv, w.lambda_adv);
    g.add(c, a)
}
