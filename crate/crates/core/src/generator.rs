//! Strip-scanning state-space generator.
//!
//! `image -> patch embedding (1/4 resolution) -> residual groups of
//! dual-branch scan blocks -> channel-reweighted spatial attention ->
//! decoder -> image`.
//!
//! Each scan block runs two branches in parallel, one over horizontal strips
//! and one over vertical strips. A branch is
//! `Linear -> DWConv 3x3 -> SiLU -> scan -> Linear -> local enhancement`,
//! wrapped by its own residual `x + alpha * branch(x)`; the block returns
//! the mean of the two branch outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scan::{DualPath, ScanOrder};
use crate::ssm::{self, SsmParams, SsmState, SsmVars};

/// How the spatial attention matrix is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionNorm {
    /// Raw bilinear product divided by `hw * C`.
    Scaled,
    /// Row softmax of the product divided by `sqrt(C)`.
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub state_dim: usize,
    pub num_rdsmb: usize,
    pub dsmb_per_rdsmb: usize,
    pub strip_size: usize,
    pub alpha_init: f64,
    pub selective: bool,
    pub attention: AttentionNorm,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            channels: 8,
            state_dim: 4,
            num_rdsmb: 1,
            dsmb_per_rdsmb: 2,
            strip_size: 4,
            alpha_init: 0.1,
            selective: false,
            attention: AttentionNorm::Scaled,
        }
    }

    pub fn paper() -> Self {
        Self {
            channels: 64,
            state_dim: 16,
            num_rdsmb: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("channels", self.channels),
            ("state_dim", self.state_dim),
            ("num_rdsmb", self.num_rdsmb),
            ("dsmb_per_rdsmb", self.dsmb_per_rdsmb),
            ("strip_size", self.strip_size),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.alpha_init.is_finite() && self.alpha_init > 0.0) {
            return Err(Error::Config(format!(
                "alpha_init must be positive, got {}",
                self.alpha_init
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SsmIds {
    pub a_raw: ParamId,
    pub b: ParamId,
    pub c_out: ParamId,
    pub d: ParamId,
    pub selection: Option<(ParamId, ParamId)>,
}

impl SsmIds {
    fn vars(&self, p: &Bound) -> SsmVars {
        SsmVars {
            a_raw: p[self.a_raw],
            b: p[self.b],
            c_out: p[self.c_out],
            d: p[self.d],
            selection: self.selection.map(|(wb, wc)| (p[wb], p[wc])),
        }
    }
}

/// One scan branch.
#[derive(Clone, Debug)]
pub struct BranchWeights {
    pub lin_in_w: ParamId,
    pub lin_in_b: ParamId,
    pub dw_kernels: ParamId,
    pub ssm: SsmIds,
    pub lin_out_w: ParamId,
    pub lin_out_b: ParamId,
    pub loe_kernels: ParamId,
    pub loe_scale: ParamId,
}

impl BranchWeights {
    /// Every parameter of the branch pipeline (everything except `alpha`).
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.lin_in_w,
            self.lin_in_b,
            self.dw_kernels,
            self.ssm.a_raw,
            self.ssm.b,
            self.ssm.c_out,
            self.ssm.d,
            self.lin_out_w,
            self.lin_out_b,
            self.loe_kernels,
            self.loe_scale,
        ];
        if let Some((wb, wc)) = self.ssm.selection {
            ids.extend([wb, wc]);
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub struct DsmbWeights {
    pub horizontal: BranchWeights,
    pub vertical: BranchWeights,
    /// One-element residual scale shared by both branches.
    pub alpha: ParamId,
}

#[derive(Clone, Debug)]
pub struct RdsmbWeights {
    pub blocks: Vec<DsmbWeights>,
}

#[derive(Clone, Debug)]
pub struct CrsaWeights {
    pub w_r: ParamId,
    pub b_r: ParamId,
}

#[derive(Clone, Debug)]
pub struct EmbedWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct GeneratorWeights {
    pub embed: EmbedWeights,
    pub groups: Vec<RdsmbWeights>,
    pub crsa: CrsaWeights,
    pub decoder: DecoderWeights,
}

fn conv_init(
    store: &mut ParamStore,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    let std = 1.0 / ((k * k * cin) as f64).sqrt();
    let w = store.add(format!("{name}.w"), Tensor::randn([k, k, cin, cout], std, rng));
    let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
    (w, b)
}

fn linear_init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> (ParamId, ParamId) {
    let w = store.add(
        format!("{name}.w"),
        Tensor::randn([cin, cout], 1.0 / (cin as f64).sqrt(), rng),
    );
    let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
    (w, b)
}

/// Adds the parameters of one scan branch to `store`.
pub fn init_branch(store: &mut ParamStore, prefix: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> BranchWeights {
    let c = cfg.channels;
    let (lin_in_w, lin_in_b) = linear_init(store, &format!("{prefix}.lin_in"), c, c, rng);
    let dw_kernels = store.add(format!("{prefix}.dw"), Tensor::randn([3, 3, c], 1.0 / 3.0, rng));
    let ssm = SsmParams::init(cfg.state_dim, c, cfg.selective, rng);
    let ssm_ids = SsmIds {
        a_raw: store.add(format!("{prefix}.ssm.a_raw"), ssm.a_raw),
        b: store.add(format!("{prefix}.ssm.b"), ssm.b),
        c_out: store.add(format!("{prefix}.ssm.c_out"), ssm.c_out),
        d: store.add(format!("{prefix}.ssm.d"), ssm.d),
        selection: ssm.selection.map(|s| {
            (
                store.add(format!("{prefix}.ssm.w_b"), s.w_b),
                store.add(format!("{prefix}.ssm.w_c"), s.w_c),
            )
        }),
    };
    let (lin_out_w, lin_out_b) = linear_init(store, &format!("{prefix}.lin_out"), c, c, rng);
    let loe_kernels = store.add(format!("{prefix}.loe.dw"), Tensor::randn([3, 3, c], 1.0 / 3.0, rng));
    let loe_scale = store.add(format!("{prefix}.loe.scale"), Tensor::full([c], 0.1));
    BranchWeights {
        lin_in_w,
        lin_in_b,
        dw_kernels,
        ssm: ssm_ids,
        lin_out_w,
        lin_out_b,
        loe_kernels,
        loe_scale,
    }
}

/// Adds one dual-branch block to `store`.
pub fn init_dsmb(store: &mut ParamStore, prefix: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> DsmbWeights {
    DsmbWeights {
        horizontal: init_branch(store, &format!("{prefix}.h"), cfg, rng),
        vertical: init_branch(store, &format!("{prefix}.v"), cfg, rng),
        alpha: store.add(format!("{prefix}.alpha"), Tensor::scalar(cfg.alpha_init)),
    }
}

pub fn init_crsa(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> CrsaWeights {
    let (w_r, b_r) = linear_init(store, &format!("{prefix}.r"), channels, channels, rng);
    CrsaWeights { w_r, b_r }
}

pub fn init_embed(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> EmbedWeights {
    let (w1, b1) = conv_init(store, "embed.conv1", 3, 3, channels, rng);
    let (w2, b2) = conv_init(store, "embed.conv2", 3, channels, channels, rng);
    EmbedWeights { w1, b1, w2, b2 }
}

pub fn init_decoder(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> DecoderWeights {
    let (w1, b1) = conv_init(store, "decoder.conv1", 3, channels, channels, rng);
    let (w2, b2) = conv_init(store, "decoder.conv2", 3, channels, channels, rng);
    let (w_out, b_out) = linear_init(store, "decoder.out", channels, 3, rng);
    DecoderWeights {
        w1,
        b1,
        w2,
        b2,
        w_out,
        b_out,
    }
}

/// Two stride-2 3x3 convolutions with SiLU between: `[H, W, 3] -> [H/4, W/4, C]`.
pub fn patch_embed(g: &Graph, p: &Bound, w: &EmbedWeights, img: Var) -> Result<Var> {
    let shape = g.shape(img);
    match shape[..] {
        [h, wd, 3] if h % 4 == 0 && wd % 4 == 0 => {}
        _ => {
            return Err(Error::Precondition(format!(
                "patch embedding needs an [H, W, 3] image with H, W divisible by 4, got {shape:?}"
            )))
        }
    }
    let x = g.conv2d(img, p[w.w1], 2, 1)?;
    let x = g.add_channel(x, p[w.b1])?;
    let x = g.silu(x);
    let x = g.conv2d(x, p[w.w2], 2, 1)?;
    g.add_channel(x, p[w.b2])
}

/// Local enhancement: `x + scale ⊙ dwconv3x3(x)`.
fn local_enhance(g: &Graph, p: &Bound, w: &BranchWeights, x: Var) -> Result<Var> {
    let local = g.conv2d_depthwise(x, p[w.loe_kernels])?;
    let local = g.mul_channel(local, p[w.loe_scale])?;
    g.add(x, local)
}

/// Branch pipeline without its residual. The pointwise stages commute with
/// the scan permutation, so only the state-space scan runs on the
/// serialized sequence.
pub fn branch_pipeline(g: &Graph, p: &Bound, w: &BranchWeights, f: Var, order: &ScanOrder) -> Result<Var> {
    let x = g.conv1x1(f, p[w.lin_in_w], p[w.lin_in_b])?;
    let x = g.conv2d_depthwise(x, p[w.dw_kernels])?;
    let x = g.silu(x);
    let seq = order.serialize(g, x)?;
    let state_dim = g.shape(p[w.ssm.a_raw])[0];
    let seq = ssm::ssm_scan(g, seq, &w.ssm.vars(p), &SsmState::zeros(state_dim))?;
    let x = order.deserialize(g, seq)?;
    let x = g.conv1x1(x, p[w.lin_out_w], p[w.lin_out_b])?;
    local_enhance(g, p, w, x)
}

pub fn dsmb_forward(g: &Graph, p: &Bound, w: &DsmbWeights, f: Var, paths: &DualPath) -> Result<Var> {
    let shape = g.shape(f);
    let (h, wd) = paths.extent();
    if shape.len() != 3 || shape[0] != h || shape[1] != wd {
        return Err(Error::dim("dsmb_forward", &shape, &[h, wd]));
    }
    let alpha = p[w.alpha];
    let mut outs = Vec::with_capacity(2);
    for (branch, order) in [(&w.horizontal, &paths.horizontal), (&w.vertical, &paths.vertical)] {
        let y = branch_pipeline(g, p, branch, f, order)?;
        let y = g.mul_scalar(y, alpha)?;
        outs.push(g.add(f, y)?);
    }
    let sum = g.add(outs[0], outs[1])?;
    Ok(g.scale(sum, 0.5))
}

/// Sequential blocks plus one outer skip: `F + blocks(F)`.
pub fn rdsmb_forward(g: &Graph, p: &Bound, w: &RdsmbWeights, f: Var, paths: &DualPath) -> Result<Var> {
    let mut x = f;
    for block in &w.blocks {
        x = dsmb_forward(g, p, block, x, paths)?;
    }
    g.add(f, x)
}

/// Spatial attention matrix `[hw, hw]` of an `[h, w, C]` map.
///
/// `G` is the channel mean, `R` a 1x1 convolution of the input,
/// `G1 = R ⊙ G` and `A = R' G1'^T`, normalized per `norm`.
pub fn crsa_attention(g: &Graph, p: &Bound, w: &CrsaWeights, f: Var, norm: AttentionNorm) -> Result<Var> {
    let shape = g.shape(f);
    let [h, wd, c] = shape[..] else {
        return Err(Error::dim("crsa_attention", &shape, &[]));
    };
    let hw = h * wd;
    let pooled = g.global_avg_pool(f)?;
    let pooled = g.reshape(pooled, [c])?;
    let r = g.conv1x1(f, p[w.w_r], p[w.b_r])?;
    let g1 = g.mul_channel(r, pooled)?;
    let r_flat = g.reshape(r, [hw, c])?;
    let g1_flat = g.reshape(g1, [hw, c])?;
    let g1_t = g.transpose(g1_flat)?;
    let scores = g.matmul(r_flat, g1_t)?;
    match norm {
        AttentionNorm::Scaled => Ok(g.scale(scores, 1.0 / (hw * c) as f64)),
        AttentionNorm::Softmax => {
            let s = g.scale(scores, 1.0 / (c as f64).sqrt());
            g.softmax_rows(s)
        }
    }
}

/// Channel-reweighted spatial attention: `reshape(A F')` with `A` from
/// [`crsa_attention`].
pub fn crsa_forward(g: &Graph, p: &Bound, w: &CrsaWeights, f: Var, norm: AttentionNorm) -> Result<Var> {
    let attention = crsa_attention(g, p, w, f, norm)?;
    let shape = g.shape(f);
    let f_flat = g.reshape(f, [shape[0] * shape[1], shape[2]])?;
    let out = g.matmul(attention, f_flat)?;
    g.reshape(out, shape)
}

/// Two (x2 nearest upsample, 3x3 conv, SiLU) stages, a 1x1 projection to
/// RGB and `tanh`.
pub fn decode(g: &Graph, p: &Bound, w: &DecoderWeights, f: Var) -> Result<Var> {
    let mut x = f;
    for (wk, bk) in [(w.w1, w.b1), (w.w2, w.b2)] {
        x = g.upsample2x(x)?;
        x = g.conv2d(x, p[wk], 1, 1)?;
        x = g.add_channel(x, p[bk])?;
        x = g.silu(x);
    }
    let x = g.conv1x1(x, p[w.w_out], p[w.b_out])?;
    Ok(g.tanh(x))
}

/// Generator parameters with their layout.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    pub weights: GeneratorWeights,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let embed = init_embed(&mut store, c, &mut rng);
        let groups = (0..config.num_rdsmb)
            .map(|i| RdsmbWeights {
                blocks: (0..config.dsmb_per_rdsmb)
                    .map(|j| init_dsmb(&mut store, &format!("rdsmb{i}.dsmb{j}"), &config, &mut rng))
                    .collect(),
            })
            .collect();
        let crsa = init_crsa(&mut store, "crsa", c, &mut rng);
        let decoder = init_decoder(&mut store, c, &mut rng);
        Ok(Self {
            config,
            params: store,
            weights: GeneratorWeights {
                embed,
                groups,
                crsa,
                decoder,
            },
        })
    }

    /// Scan paths for an `h x w` feature map. The strip size is clamped to
    /// the smaller feature extent.
    pub fn paths_for(&self, h: usize, w: usize) -> Result<DualPath> {
        DualPath::new(h, w, self.config.strip_size.min(h).min(w))
    }

    pub fn forward(&self, g: &Graph, p: &Bound, img: Var) -> Result<Var> {
        self.forward_with_paths(g, p, img, None)
    }

    /// Forward pass; `paths` overrides the strip scan orders.
    pub fn forward_with_paths(&self, g: &Graph, p: &Bound, img: Var, paths: Option<&DualPath>) -> Result<Var> {
        {
            let v = g.value_ref(img);
            if v.data().iter().any(|x| !(-1.0..=1.0).contains(x)) {
                return Err(Error::Precondition("generator input must lie in [-1, 1]".into()));
            }
        }
        let w = &self.weights;
        let mut x = patch_embed(g, p, &w.embed, img)?;
        let shape = g.shape(x);
        let owned;
        let paths = match paths {
            Some(p) => p,
            None => {
                owned = self.paths_for(shape[0], shape[1])?;
                &owned
            }
        };
        for group in &w.groups {
            x = rdsmb_forward(g, p, group, x, paths)?;
        }
        let x = crsa_forward(g, p, &w.crsa, x, self.config.attention)?;
        decode(g, p, &w.decoder, x)
    }

    /// Inference on a plain tensor.
    pub fn stylize(&self, img: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(img.clone());
        let y = self.forward(&g, &p, x)?;
        Ok(g.value(y))
    }

    /// Every parameter id of the scan-branch pipelines (not `alpha`).
    pub fn pipeline_ids(&self) -> Vec<ParamId> {
        self.weights
            .groups
            .iter()
            .flat_map(|grp| &grp.blocks)
            .flat_map(|b| b.horizontal.ids().into_iter().chain(b.vertical.ids()))
            .collect()
    }
}
