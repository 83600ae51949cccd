//! Self-verification: oracle comparisons, invariant sweeps and gradient
//! checks, reported as named pass/fail rows.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Profile;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{self, AttentionNorm, Generator, GeneratorConfig, RdsmbWeights};
use crate::losses::{self, AdvMode, FeatureExtractor, LossWeights};
use crate::numerics::{finite_diff_check_inputs, finite_diff_check_smooth, Coords, Graph, Tensor, Var};
use crate::params::ParamStore;
use crate::reference;
use crate::scan::{self, DualPath, Orientation, ScanOrder};
use crate::ssm::{self, SsmParams, SsmState};

pub const FD_EPS: f64 = 1e-5;
pub const COMPONENT_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// Hand-enumerated horizontal-strip order of a 4x4 grid with strips of 2.
pub const FIXTURE_4X4_S2: [usize; 16] = [0, 4, 5, 1, 2, 6, 7, 3, 11, 15, 14, 10, 9, 13, 12, 8];

/// Deliberate faults for checking that the checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Nudges one output of the fused scan before comparison.
    SsmOracle,
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssm-oracle" => Ok(Mutation::SsmOracle),
            other => Err(Error::Usage(format!("unknown mutation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<22} {:>8.2?}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed,
            self.detail
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> std::result::Result<String, String>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn scan_grids() -> impl Iterator<Item = (usize, usize, usize, Orientation)> {
    (1..=12).flat_map(|h| {
        (1..=12).flat_map(move |w| {
            [Orientation::Horizontal, Orientation::Vertical]
                .into_iter()
                .flat_map(move |o| {
                    let limit = match o {
                        Orientation::Horizontal => h,
                        Orientation::Vertical => w,
                    };
                    (1..=4.min(limit)).map(move |s| (h, w, s, o))
                })
        })
    })
}

pub fn check_scan_bijectivity() -> CheckOutcome {
    timed("scan-bijectivity", || {
        let mut count = 0;
        for (h, w, s, o) in scan_grids() {
            let order = ScanOrder::build(h, w, s, o).map_err(err)?;
            let mut sorted = order.perm().to_vec();
            sorted.sort_unstable();
            if sorted.iter().enumerate().any(|(i, &v)| i != v) {
                return Err(format!("{h}x{w} s={s} {o}: not a permutation"));
            }
            if (0..h * w).any(|i| order.inv_perm()[order.perm()[i]] != i) {
                return Err(format!("{h}x{w} s={s} {o}: inverse mismatch"));
            }
            count += 1;
        }
        Ok(format!("{count} orders"))
    })
}

pub fn check_scan_adjacency() -> CheckOutcome {
    timed("scan-adjacency", || {
        let mut count = 0;
        for (h, w, s, o) in scan_grids() {
            let order = ScanOrder::build(h, w, s, o).map_err(err)?;
            scan::verify_strip_invariants(&order).map_err(|e| format!("{h}x{w} s={s} {o}: {e}"))?;
            count += 1;
        }
        Ok(format!("{count} orders"))
    })
}

pub fn check_scan_fixture() -> CheckOutcome {
    timed("scan-fixture", || {
        let h = ScanOrder::build(4, 4, 2, Orientation::Horizontal).map_err(err)?;
        if h.perm() != FIXTURE_4X4_S2 {
            return Err(format!("horizontal {:?}", h.perm()));
        }
        let v = ScanOrder::build(4, 4, 2, Orientation::Vertical).map_err(err)?;
        let transposed: Vec<usize> = FIXTURE_4X4_S2.iter().map(|&f| (f % 4) * 4 + f / 4).collect();
        if v.perm() != transposed {
            return Err(format!("vertical {:?}", v.perm()));
        }
        Ok("4x4 s=2 both orientations".into())
    })
}

fn ssm_oracle(name: &str, selective: bool, mutation: Option<Mutation>) -> CheckOutcome {
    timed(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(if selective { 2 } else { 1 });
        let mut worst = 0.0f64;
        for case in 0..200 {
            let len = rng.random_range(1..=64);
            let c = rng.random_range(1..=8);
            let n = rng.random_range(1..=16);
            let p = SsmParams::init(n, c, selective, &mut rng);
            let seq = Tensor::randn([len, c], 1.0, &mut rng);
            let h0 = SsmState::zeros(n);
            let mut fused = ssm::ssm_scan_tensor(&seq, &p, &h0).map_err(err)?;
            if mutation == Some(Mutation::SsmOracle) && case == 0 {
                fused.data_mut()[0] += 1e-9;
            }
            let naive = ssm::ssm_scan_naive(&seq, &p, &h0).map_err(err)?;
            worst = worst.max(fused.max_abs_diff(&naive));
        }
        if worst < 1e-12 {
            Ok(format!("200 cases, max diff {worst:.1e}"))
        } else {
            Err(format!("max diff {worst:.3e} >= 1e-12"))
        }
    })
}

pub fn check_ssm_oracle(mutation: Option<Mutation>) -> CheckOutcome {
    ssm_oracle("ssm-oracle", false, mutation)
}

pub fn check_ssm_selective_oracle() -> CheckOutcome {
    ssm_oracle("ssm-selective-oracle", true, None)
}

pub fn check_crsa_oracle() -> CheckOutcome {
    timed("crsa-oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (h, w, c) = (
                rng.random_range(1..=6),
                rng.random_range(1..=6),
                rng.random_range(1..=4),
            );
            let mut store = ParamStore::new();
            let wts = generator::init_crsa(&mut store, "crsa", c, &mut rng);
            *store.get_mut(wts.b_r) = Tensor::randn([c], 0.5, &mut rng);
            let f = Tensor::randn([h, w, c], 1.0, &mut rng);
            for norm in [AttentionNorm::Scaled, AttentionNorm::Softmax] {
                let g = Graph::new();
                let p = store.bind(&g, false);
                let x = g.constant(f.clone());
                let got = g.value(generator::crsa_forward(&g, &p, &wts, x, norm).map_err(err)?);
                let want = reference::crsa_naive(&f, store.get(wts.w_r), store.get(wts.b_r), norm);
                worst = worst.max(got.max_abs_diff(&want));
            }
        }
        if worst < 1e-12 {
            Ok(format!("50 cases x 2 norms, max diff {worst:.1e}"))
        } else {
            Err(format!("max diff {worst:.3e} >= 1e-12"))
        }
    })
}

fn scalar(f: impl Fn(&Graph) -> Result<Var>) -> std::result::Result<f64, String> {
    let g = Graph::new();
    let v = f(&g).map_err(err)?;
    Ok(g.value(v).item())
}

pub fn check_loss_identities() -> CheckOutcome {
    timed("loss-identities", || {
        let ln2 = std::f64::consts::LN_2;
        let phi = FeatureExtractor::seeded(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::uniform([16, 16, 3], -1.0, 1.0, &mut rng);
        let same = scalar(|g| {
            let (a, b) = (g.constant(img.clone()), g.constant(img.clone()));
            losses::content_loss(g, &phi, a, b)
        })?;
        if same != 0.0 {
            return Err(format!("content(I, I) = {same}"));
        }
        let zeros = || vec![Tensor::zeros([4, 4, 1]), Tensor::zeros([2, 2, 1])];
        let consts = |g: &Graph| zeros().into_iter().map(|t| g.constant(t)).collect::<Vec<_>>();
        let d = scalar(|g| losses::adv_loss_discriminator(g, &consts(g), &consts(g)))?;
        let s = scalar(|g| losses::adv_loss_generator(g, &consts(g), AdvMode::Saturating))?;
        let n = scalar(|g| losses::adv_loss_generator(g, &consts(g), AdvMode::NonSaturating))?;
        if (d - 2.0 * ln2).abs() > 1e-12 || (s + ln2).abs() > 1e-12 || (n - ln2).abs() > 1e-12 {
            return Err(format!("even-odds values d={d} sat={s} nonsat={n}"));
        }
        let t = scalar(|g| {
            let (c, a) = (g.constant(Tensor::scalar(0.2)), g.constant(Tensor::scalar(0.1)));
            losses::total_loss(g, c, a, &LossWeights::default())
        })?;
        if (t - 0.7).abs() > 1e-12 {
            return Err(format!("total(0.2, 0.1) = {t}"));
        }
        Ok("content 0, 2 ln2, -/+ ln2, total 0.7".into())
    })
}

pub fn check_residual_identity() -> CheckOutcome {
    timed("residual-identity", || {
        let cfg = GeneratorConfig {
            channels: 4,
            state_dim: 3,
            ..GeneratorConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let group = RdsmbWeights {
            blocks: (0..2)
                .map(|i| generator::init_dsmb(&mut store, &format!("b{i}"), &cfg, &mut rng))
                .collect(),
        };
        for b in &group.blocks {
            for id in b.horizontal.ids().into_iter().chain(b.vertical.ids()) {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let f = Tensor::randn([6, 6, 4], 1.0, &mut rng);
        let paths = DualPath::new(6, 6, 4).map_err(err)?;
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(f.clone());
        let one = g.value(generator::dsmb_forward(&g, &p, &group.blocks[0], x, &paths).map_err(err)?);
        if one != f {
            return Err("zero-pipeline block is not the identity".into());
        }
        let two = g.value(generator::rdsmb_forward(&g, &p, &group, x, &paths).map_err(err)?);
        if two != f.map(|v| v + v) {
            return Err("zero-weight group is not 2F".into());
        }
        Ok("block = F, group = 2F (bitwise)".into())
    })
}

/// Sizes of the gradient suite.
#[derive(Clone, Debug)]
pub struct GradSuite {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub image_size: usize,
    /// Coordinates sampled per tensor in component checks.
    pub per_tensor: usize,
    /// Coordinates sampled per tensor end to end.
    pub per_tensor_e2e: usize,
}

impl GradSuite {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            generator: profile.generator(),
            discriminator: profile.discriminator(),
            image_size: 32,
            per_tensor: 4,
            per_tensor_e2e: match profile {
                Profile::Desk => 2,
                Profile::Paper => 1,
            },
        }
    }
}

/// Perturbs every parameter so zero-initialized entries do not hide
/// gradient mistakes.
fn jitter(store: &mut ParamStore, rng: &mut impl Rng) {
    for t in store.tensors_mut() {
        let noise = Tensor::randn(t.shape().to_vec(), 0.1, rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

/// Gradient check of `sum(probe ⊙ f(x))` over `x` and all of `store`.
fn block_check<F>(store: &ParamStore, x: &Tensor, per_tensor: usize, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&Graph, &crate::params::Bound, Var) -> Result<Var>,
{
    let n = store.len();
    let shape = {
        let g = Graph::new();
        let p = store.bind(&g, false);
        let xv = g.constant(x.clone());
        g.shape(f(&g, &p, xv)?)
    };
    let probe = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut inputs = store.tensors().to_vec();
    inputs.push(x.clone());
    let report = finite_diff_check_inputs(
        |g, vars| {
            let p = ParamStore::bound_from(vars[..n].to_vec());
            let y = f(g, &p, vars[n])?;
            let w = g.constant(probe.clone());
            let prod = g.mul(y, w)?;
            Ok(g.sum(prod))
        },
        &inputs,
        FD_EPS,
        Coords::Sample {
            per_input: per_tensor,
            seed,
        },
    )?;
    Ok(report.max_rel_error)
}

fn grad_outcome(name: &str, tol: f64, f: impl FnOnce() -> Result<f64>) -> CheckOutcome {
    timed(name, || {
        let e = f().map_err(err)?;
        if e < tol {
            Ok(format!("max rel err {e:.2e} < {tol:.0e}"))
        } else {
            Err(format!("max rel err {e:.3e} >= {tol:.0e}"))
        }
    })
}

/// Finite-difference checks per component and end to end.
pub fn gradient_suite(suite: &GradSuite) -> Vec<CheckOutcome> {
    let gcfg = &suite.generator;
    let c = gcfg.channels;
    let side = suite.image_size;
    let feat = side / 4;
    let per = suite.per_tensor;
    let mut out = Vec::new();

    out.push(grad_outcome("grad-dsmb", COMPONENT_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let w = generator::init_dsmb(&mut store, "b", gcfg, &mut rng);
        jitter(&mut store, &mut rng);
        let f = Tensor::randn([feat, feat, c], 1.0, &mut rng);
        let paths = DualPath::new(feat, feat, gcfg.strip_size.min(feat))?;
        block_check(&store, &f, per, 11, |g, p, x| {
            generator::dsmb_forward(g, p, &w, x, &paths)
        })
    }));

    out.push(grad_outcome("grad-rdsmb", COMPONENT_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let group = RdsmbWeights {
            blocks: (0..gcfg.dsmb_per_rdsmb)
                .map(|i| generator::init_dsmb(&mut store, &format!("b{i}"), gcfg, &mut rng))
                .collect(),
        };
        jitter(&mut store, &mut rng);
        let f = Tensor::randn([feat, feat, c], 1.0, &mut rng);
        let paths = DualPath::new(feat, feat, gcfg.strip_size.min(feat))?;
        block_check(&store, &f, per, 13, |g, p, x| {
            generator::rdsmb_forward(g, p, &group, x, &paths)
        })
    }));

    out.push(grad_outcome("grad-crsa", COMPONENT_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let w = generator::init_crsa(&mut store, "crsa", c, &mut rng);
        jitter(&mut store, &mut rng);
        let f = Tensor::randn([feat, feat, c], 1.0, &mut rng);
        block_check(&store, &f, per, 15, |g, p, x| {
            generator::crsa_forward(g, p, &w, x, gcfg.attention)
        })
    }));

    out.push(grad_outcome("grad-discriminator", COMPONENT_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut d = Discriminator::new(suite.discriminator.clone(), 17)?;
        jitter(&mut d.params, &mut rng);
        let real = Tensor::uniform([side, side, 3], -1.0, 1.0, &mut rng);
        let fake = Tensor::uniform([side, side, 3], -1.0, 1.0, &mut rng);
        let n = d.params.len();
        let mut inputs = d.params.tensors().to_vec();
        inputs.push(fake);
        let report = finite_diff_check_smooth(
            |g, vars| {
                let p = ParamStore::bound_from(vars[..n].to_vec());
                let r = g.constant(real.clone());
                let rm = d.forward(g, &p, r)?;
                let fm = d.forward(g, &p, vars[n])?;
                losses::adv_loss_discriminator(g, &rm, &fm)
            },
            &inputs,
            FD_EPS,
            Coords::Sample {
                per_input: per,
                seed: 18,
            },
        )?;
        Ok(report.max_rel_error)
    }));

    out.push(grad_outcome("grad-content-loss", COMPONENT_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let phi = FeatureExtractor::seeded(20);
        let content = Tensor::uniform([side, side, 3], -1.0, 1.0, &mut rng);
        let stylized = Tensor::uniform([side, side, 3], -1.0, 1.0, &mut rng);
        let report = finite_diff_check_inputs(
            |g, v| {
                let c = g.constant(content.clone());
                losses::content_loss(g, &phi, c, v[0])
            },
            &[stylized],
            FD_EPS,
            Coords::Sample {
                per_input: 64,
                seed: 21,
            },
        )?;
        Ok(report.max_rel_error)
    }));

    let logit_maps = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..suite.discriminator.scales)
            .map(|m| {
                let s = (side >> m) / suite.discriminator.stride_product();
                Tensor::randn([s.max(1), s.max(1), 1], 2.0, &mut rng)
            })
            .collect::<Vec<_>>()
    };
    let m = suite.discriminator.scales;
    out.push(grad_outcome("grad-adv-discriminator", COMPONENT_TOL, || {
        let maps = [logit_maps(22), logit_maps(23)].concat();
        let r = finite_diff_check_inputs(
            |g, v| losses::adv_loss_discriminator(g, &v[..m], &v[m..]),
            &maps,
            FD_EPS,
            Coords::All,
        )?;
        Ok(r.max_rel_error)
    }));
    out.push(grad_outcome("grad-adv-generator", COMPONENT_TOL, || {
        let maps = logit_maps(24);
        let mut worst = 0.0f64;
        for mode in [AdvMode::Saturating, AdvMode::NonSaturating] {
            let r = finite_diff_check_inputs(
                |g, v| losses::adv_loss_generator(g, v, mode),
                &maps,
                FD_EPS,
                Coords::All,
            )?;
            worst = worst.max(r.max_rel_error);
        }
        Ok(worst)
    }));

    // Largest coordinates of every tensor; perturbations that cross a
    // leaky-ReLU or clamp kink are skipped.
    out.push(grad_outcome("grad-end-to-end", END_TO_END_TOL, || {
        let gen = Generator::new(gcfg.clone(), 25)?;
        let disc = Discriminator::new(suite.discriminator.clone(), 26)?;
        let phi = FeatureExtractor::seeded(27);
        let weights = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let content = Tensor::uniform([side, side, 3], -1.0, 1.0, &mut rng);
        let report = finite_diff_check_smooth(
            |g, vars| {
                let gp = ParamStore::bound_from(vars.to_vec());
                let dp = disc.params.bind(g, false);
                let c = g.constant(content.clone());
                let fake = gen.forward(g, &gp, c)?;
                let lc = losses::content_loss(g, &phi, c, fake)?;
                let maps = disc.forward(g, &dp, fake)?;
                let la = losses::adv_loss_generator(g, &maps, AdvMode::NonSaturating)?;
                losses::total_loss(g, lc, la, &weights)
            },
            gen.params.tensors(),
            FD_EPS,
            Coords::Largest {
                per_input: suite.per_tensor_e2e,
            },
        )?;
        Ok(report.max_rel_error)
    }));

    out
}

/// Every named check. `mutation` injects a deliberate fault.
pub fn selftest(mutation: Option<Mutation>) -> Vec<CheckOutcome> {
    let mut out = vec![
        check_scan_bijectivity(),
        check_scan_adjacency(),
        check_scan_fixture(),
        check_ssm_oracle(mutation),
        check_ssm_selective_oracle(),
        check_crsa_oracle(),
        check_loss_identities(),
        check_residual_identity(),
    ];
    out.extend(gradient_suite(&GradSuite::for_profile(Profile::Desk)));
    out
}
