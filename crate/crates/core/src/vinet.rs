//! VINet: amortized posterior N(ū_p, (a + δL)⁻²) ⊗ Π IG(α_i, β_i) produced by
//! DNet → CECInv → ENet and SNet, trained on the negative ELBO.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{digamma_raw, lgamma, trigamma, HyperpriorConfig, IGParams};
use crate::classical::{landweber_matrix, tsvd_matrix};
use crate::error::{Error, Result};
use crate::forward::{DenseForward, EllipticForward, ForwardConfig, HelmholtzForward, LinearForward, ModelKind, SensorConfig};
use crate::grid::{Grid, GridFunction, Rescaler};
use crate::linalg::BandLdl;
use crate::nn::{sigmoid, AdamState, Bound, Graph, Layer, LayerSpec, ParamStore, Tensor, Var};
use crate::prior::{white_noise, ShiftedLaplacian, VariableCovariance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnetKind {
    #[default]
    Unet,
    Fno,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Channels {
    pub snet: usize,
    pub dnet: usize,
    pub enet: usize,
    pub fno_width: usize,
    pub fno_modes: usize,
}

impl Default for Channels {
    fn default() -> Self {
        Channels { snet: 16, dnet: 8, enet: 8, fno_width: 24, fno_modes: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CecConfig {
    pub grid: usize,
    /// TSVD truncation λ_m/λ₁ (elliptic)
    pub lambda_rel: f64,
    /// Landweber steps per frequency (Helmholtz)
    pub inner: usize,
    pub step_fraction: f64,
}

impl Default for CecConfig {
    fn default() -> Self {
        CecConfig { grid: 17, lambda_rel: 0.2, inner: 20, step_fraction: 0.9 }
    }
}

/// Prior N(ū₀, (c + δL)⁻²) with c = ε₀⁻¹; δ is shared with the posterior family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub c: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VinetConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub batch: usize,
    pub seed: u64,
    pub enet: EnetKind,
    pub channels: Channels,
    pub a_min: f64,
    pub a_max: f64,
    pub prior: PriorSpec,
    pub hyper: HyperpriorConfig,
    pub cec: CecConfig,
    /// ENet works on a fixed native grid; rescale layers map in and out.
    pub native_grid: usize,
    pub train_grid: usize,
}

impl Default for VinetConfig {
    fn default() -> Self {
        VinetConfig {
            stage1_epochs: 10,
            stage2_epochs: 15,
            lr: 1e-3,
            lr_halve_every: 10,
            batch: 4,
            seed: 0,
            enet: EnetKind::Unet,
            channels: Channels::default(),
            a_min: 1.0,
            a_max: 1e4,
            // small prior covariance around the synthetic truth
            prior: PriorSpec { c: 1e3, delta: 0.05 },
            hyper: HyperpriorConfig {
                alpha0: crate::bayes::ScalarOrVec::Scalar(1.5),
                beta0: crate::bayes::ScalarOrVec::Scalar(1e-3),
            },
            cec: CecConfig::default(),
            native_grid: 32,
            train_grid: 33,
        }
    }
}

impl VinetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_min > 0.0 && self.a_max > self.a_min) {
            return Err(Error::Config(format!("need 0 < a_min < a_max (got {}, {})", self.a_min, self.a_max)));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.lr_halve_every == 0 {
            return Err(Error::Config("lr, batch and lr_halve_every must be positive".into()));
        }
        if !(self.prior.c > 0.0 && self.prior.delta > 0.0) {
            return Err(Error::Config("prior needs c > 0 and delta > 0".into()));
        }
        if self.native_grid % 8 != 0 {
            return Err(Error::Config("native grid must be divisible by 8".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
    }
}

/// Data vectors viewed as a one-channel [rows, cols] image: the elliptic
/// sensor lattice, or (frequency, re/im) rows × boundary points for Helmholtz.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataLayout {
    pub rows: usize,
    pub cols: usize,
}

impl DataLayout {
    pub fn for_forward(f: &ForwardConfig) -> Result<Self> {
        let l = match (&f.model, &f.sensors) {
            (ModelKind::Elliptic, SensorConfig::Lattice { m }) => DataLayout { rows: *m, cols: *m },
            (ModelKind::Helmholtz, SensorConfig::Boundary { per_side }) => DataLayout { rows: 2 * f.kappas.len(), cols: 4 * per_side },
            _ => return Err(Error::Config("data layout needs a lattice (elliptic) or boundary (Helmholtz) sensor set".into())),
        };
        if l.rows % 4 != 0 || l.cols % 4 != 0 {
            return Err(Error::Config(format!("data array {}x{} must be divisible by 4 for DNet pooling", l.rows, l.cols)));
        }
        Ok(l)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self, d: &[f64]) -> Result<Tensor> {
        if d.len() != self.len() {
            return Err(Error::shape("data layout", format!("{} values for a {}x{} array", d.len(), self.rows, self.cols)));
        }
        Tensor::new(vec![1, self.rows, self.cols], d.to_vec())
    }
}

fn conv(spec_in: usize, out: usize, k: usize, store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Layer {
    Layer::new(LayerSpec::Conv2d { cin: spec_in, cout: out, k }, store, name, rng)
}

fn zero_layer(l: &Layer, store: &mut ParamStore) {
    for &p in &l.params {
        store.tensors[p].data.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// U-Net with `levels` encoder blocks (the last is the bottleneck) and
/// `levels − 1` decoder blocks; two 3×3 convs + ReLU per block, 1×1 head.
#[derive(Clone, Debug)]
pub struct UNet {
    enc: Vec<[Layer; 2]>,
    dec: Vec<[Layer; 2]>,
    head: Layer,
}

impl UNet {
    pub fn new(cin: usize, cout: usize, base: usize, levels: usize, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let width = |l: usize| base << l;
        let enc = (0..levels)
            .map(|l| {
                let i = if l == 0 { cin } else { width(l - 1) };
                [conv(i, width(l), 3, store, &format!("{prefix}.enc{l}a"), rng), conv(width(l), width(l), 3, store, &format!("{prefix}.enc{l}b"), rng)]
            })
            .collect();
        let dec = (0..levels - 1)
            .rev()
            .map(|l| {
                [
                    conv(width(l + 1) + width(l), width(l), 3, store, &format!("{prefix}.dec{l}a"), rng),
                    conv(width(l), width(l), 3, store, &format!("{prefix}.dec{l}b"), rng),
                ]
            })
            .collect();
        let head = conv(base, cout, 1, store, &format!("{prefix}.head"), rng);
        zero_layer(&head, store);
        UNet { enc, dec, head }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let mut skips = Vec::new();
        let mut v = x;
        for (l, blk) in self.enc.iter().enumerate() {
            if l > 0 {
                v = g.avgpool2(v)?;
            }
            v = blk[0].forward(g, b, v)?;
            v = g.relu(v);
            v = blk[1].forward(g, b, v)?;
            v = g.relu(v);
            skips.push(v);
        }
        skips.pop();
        for blk in &self.dec {
            let up = g.upsample2(v)?;
            let skip = skips.pop().expect("one skip per decoder block");
            let c = g.cat(&[up, skip])?;
            v = blk[0].forward(g, b, c)?;
            v = g.relu(v);
            v = blk[1].forward(g, b, v)?;
            v = g.relu(v);
        }
        self.head.forward(g, b, v)
    }
}

/// DnCNN-style plain conv stack.
#[derive(Clone, Debug)]
pub struct DnCnn {
    layers: Vec<Layer>,
}

impl DnCnn {
    pub fn new(cin: usize, cout: usize, width: usize, depth: usize, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let i = if l == 0 { cin } else { width };
                let o = if l + 1 == depth { cout } else { width };
                conv(i, o, 3, store, &format!("{prefix}.{l}"), rng)
            })
            .collect();
        DnCnn { layers }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let mut v = x;
        for (i, l) in self.layers.iter().enumerate() {
            v = l.forward(g, b, v)?;
            if i + 1 < self.layers.len() {
                v = g.relu(v);
            }
        }
        Ok(v)
    }

    fn last(&self) -> &Layer {
        self.layers.last().expect("non-empty stack")
    }
}

/// Lift P (1×1), four Fourier blocks v ← σ(K v + W v), projection Q.
#[derive(Clone, Debug)]
pub struct Fno {
    lift: Layer,
    blocks: Vec<(Layer, Layer)>,
    q1: Layer,
    q2: Layer,
    width: usize,
}

impl Fno {
    pub fn new(cin: usize, cout: usize, ch: &Channels, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let w = ch.fno_width;
        let lift = conv(cin, w, 1, store, &format!("{prefix}.lift"), rng);
        let blocks = (0..4)
            .map(|i| {
                (
                    Layer::new(LayerSpec::SpectralMul { cin: w, cout: w, modes: ch.fno_modes }, store, &format!("{prefix}.k{i}"), rng),
                    conv(w, w, 1, store, &format!("{prefix}.w{i}"), rng),
                )
            })
            .collect();
        let q1 = conv(w, w, 1, store, &format!("{prefix}.q1"), rng);
        let q2 = conv(w, cout, 1, store, &format!("{prefix}.q2"), rng);
        zero_layer(&q2, store);
        Fno { lift, blocks, q1, q2, width: w }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let (_, _, wd) = g.value(x).chw("fno")?;
        let mut v = self.lift.forward(g, b, x)?;
        for (i, (k, w)) in self.blocks.iter().enumerate() {
            let f = g.rfft2(v)?;
            let f = k.forward(g, b, f)?;
            let s = g.irfft2(f, wd)?;
            let l = w.forward(g, b, v)?;
            v = g.add(s, l)?;
            if i + 1 < self.blocks.len() {
                v = g.relu(v);
            }
        }
        debug_assert_eq!(g.value(v).shape[0], self.width);
        let v = self.q1.forward(g, b, v)?;
        let v = g.relu(v);
        self.q2.forward(g, b, v)
    }
}

#[derive(Clone, Debug)]
pub enum Enet {
    Unet(UNet),
    Fno(Fno),
}

impl Enet {
    fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        match self {
            Enet::Unet(u) => u.forward(g, b, x),
            Enet::Fno(f) => f.forward(g, b, x),
        }
    }

    fn head(&self) -> &Layer {
        match self {
            Enet::Unet(u) => &u.head,
            Enet::Fno(f) => &f.q2,
        }
    }
}

/// Precomputed coarse classical inversion: one nodal matrix per stage on the
/// coarse grid, plus the same maps composed with the rescale to ENet's grid.
#[derive(Clone, Debug)]
pub struct CecInv {
    pub grid: Grid,
    pub stages: Vec<DMatrix<f64>>,
    native: Arc<Vec<DMatrix<f64>>>,
    native_grid: Grid,
}

impl CecInv {
    pub fn build(forward: &ForwardConfig, cec: &CecConfig, native_grid: Grid) -> Result<Self> {
        let grid = Grid::unit(cec.grid);
        let sensors = forward.sensors.build();
        let stages = match forward.model {
            ModelKind::Elliptic => {
                let h = EllipticForward::new(grid, forward.alpha_pde, sensors)?;
                vec![tsvd_matrix(&DenseForward::assemble(&h)?, cec.lambda_rel)?]
            }
            ModelKind::Helmholtz => {
                let mut blocks = Vec::new();
                for &k in &forward.kappas {
                    let h = HelmholtzForward::new(grid, vec![k], forward.pml, sensors.clone())?.without_cache();
                    blocks.push(DenseForward::assemble(&h)?);
                }
                let total: usize = blocks.iter().map(|b| b.n_data).sum();
                let mut out = Vec::new();
                for s in 0..blocks.len() {
                    let r = landweber_matrix(&blocks[..=s], cec.inner, cec.step_fraction)?;
                    let mut full = DMatrix::zeros(grid.len(), total);
                    full.columns_mut(0, r.ncols()).copy_from(&r);
                    out.push(full);
                }
                out
            }
        };
        let resc = Rescaler::new(grid, native_grid);
        let native = stages
            .iter()
            .map(|m| {
                let mut p = DMatrix::zeros(native_grid.len(), m.ncols());
                for c in 0..m.ncols() {
                    let col: Vec<f64> = m.column(c).iter().cloned().collect();
                    p.set_column(c, &DVector::from_vec(resc.apply_raw(&col)));
                }
                p
            })
            .collect();
        Ok(CecInv { grid, stages, native: Arc::new(native), native_grid })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn n_data(&self) -> usize {
        self.stages[0].ncols()
    }

    pub fn apply(&self, d_hat: &[f64]) -> Result<Vec<GridFunction>> {
        if d_hat.len() != self.n_data() {
            return Err(Error::shape("cecinv", format!("{} data for a map expecting {}", d_hat.len(), self.n_data())));
        }
        let v = DVector::from_column_slice(d_hat);
        Ok(self.stages.iter().map(|m| GridFunction { grid: self.grid, values: (m * &v).iter().cloned().collect() }).collect())
    }

    /// [2, rows, cols] (denoised data, auxiliary) → [stages + 1, n, n] on the
    /// native grid; the extra channel is the last stage applied to the auxiliary data.
    fn layer(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let nd = self.n_data();
        let ns = self.n_stages();
        let nn = self.native_grid.len();
        let mats = self.native.clone();
        let mats_t = self.native.clone();
        let fwd = Arc::new(move |v: &[f64]| {
            let dh = DVector::from_column_slice(&v[..nd]);
            let aux = DVector::from_column_slice(&v[nd..2 * nd]);
            let mut out = Vec::with_capacity((ns + 1) * nn);
            for m in mats.iter() {
                out.extend((m * &dh).iter());
            }
            out.extend((mats[ns - 1].clone() * aux).iter());
            out
        });
        let tr = Arc::new(move |gv: &[f64]| {
            let mut gd = DVector::zeros(nd);
            for (s, m) in mats_t.iter().enumerate() {
                gd += m.tr_mul(&DVector::from_column_slice(&gv[s * nn..(s + 1) * nn]));
            }
            let ga = mats_t[ns - 1].tr_mul(&DVector::from_column_slice(&gv[ns * nn..]));
            let mut out: Vec<f64> = gd.iter().cloned().collect();
            out.extend(ga.iter());
            out
        });
        g.linear_map(x, vec![ns + 1, self.native_grid.nx, self.native_grid.ny], fwd, tr)
    }
}

fn rescale_layer(g: &mut Graph, x: Var, src: Grid, dst: Grid) -> Result<Var> {
    let r = Arc::new(Rescaler::new(src, dst));
    if r.is_identity() {
        return Ok(x);
    }
    let r2 = r.clone();
    g.linear_map(x, vec![1, dst.nx, dst.ny], Arc::new(move |v: &[f64]| r.apply_raw(v)), Arc::new(move |v: &[f64]| r2.transpose_raw(v)))
}

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub const ALPHA_FLOOR: f64 = 1.0 + 1e-3;
pub const BETA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct VinetModel {
    pub config: VinetConfig,
    pub forward: ForwardConfig,
    pub layout: DataLayout,
    /// Networks see d / data_scale; DNet corrections are scaled back.
    pub data_scale: f64,
    pub dnet_params: ParamStore,
    pub snet_params: ParamStore,
    pub enet_params: ParamStore,
    pub dnet: UNet,
    pub snet: DnCnn,
    pub enet: Enet,
    pub cec: CecInv,
    pub native_grid: Grid,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    config: VinetConfig,
    forward: ForwardConfig,
    data_scale: f64,
}

/// Variables produced by one pass through the networks.
pub struct Outputs {
    pub u_bar: Var,
    pub a: Var,
    pub alpha: Var,
    pub beta: Var,
}

struct Binds {
    d: Bound,
    s: Bound,
    e: Bound,
}

impl VinetModel {
    pub fn new(config: &VinetConfig, forward: &ForwardConfig) -> Result<Self> {
        config.validate()?;
        let layout = DataLayout::for_forward(forward)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ch = &config.channels;
        let (mut dp, mut sp, mut ep) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        let dnet = UNet::new(1, 2, ch.dnet, 3, &mut dp, "dnet", &mut rng);
        let snet = DnCnn::new(1, 2, ch.snet, 5, &mut sp, "snet", &mut rng);
        // start SNet at the hyperprior's one-step update (α⁰ + ½, β⁰)
        let ig0 = config.hyper.build(1)?;
        zero_layer(snet.last(), &mut sp);
        let sb = snet.last().params[1];
        sp.tensors[sb].data[0] = inv_softplus((ig0.alpha[0] + 0.5 - ALPHA_FLOOR).max(1e-3));
        sp.tensors[sb].data[1] = inv_softplus((ig0.beta[0] - BETA_FLOOR).max(1e-9));
        let native_grid = Grid::unit(config.native_grid);
        let cec = CecInv::build(forward, &config.cec, native_grid)?;
        let cin = cec.n_stages() + 1;
        let enet = match config.enet {
            EnetKind::Unet => Enet::Unet(UNet::new(cin, 2, ch.enet, 4, &mut ep, "enet", &mut rng)),
            EnetKind::Fno => Enet::Fno(Fno::new(cin, 2, ch, &mut ep, "enet", &mut rng)),
        };
        // a starts at the prior's constant c when it lies inside the bounds
        let p = ((config.prior.c - config.a_min) / (config.a_max - config.a_min)).clamp(0.01, 0.99);
        let hb = enet.head().params[1];
        ep.tensors[hb].data[1] = logit(p);
        Ok(VinetModel {
            config: config.clone(),
            forward: forward.clone(),
            layout,
            data_scale: 1.0,
            dnet_params: dp,
            snet_params: sp,
            enet_params: ep,
            dnet,
            snet,
            enet,
            cec,
            native_grid,
        })
    }

    pub fn n_data(&self) -> usize {
        self.layout.len()
    }

    fn bind(&self, g: &mut Graph) -> Binds {
        Binds { d: self.dnet_params.bind(g), s: self.snet_params.bind(g), e: self.enet_params.bind(g) }
    }

    fn scaled_input(&self, g: &mut Graph, d: &[f64]) -> Result<Var> {
        let t = self.layout.tensor(&d.iter().map(|v| v / self.data_scale).collect::<Vec<_>>())?;
        Ok(g.leaf(t))
    }

    /// (d̂, aux) as a [2, rows, cols] variable in data units.
    fn dnet_graph(&self, g: &mut Graph, b: &Bound, d: &[f64]) -> Result<Var> {
        let x = self.scaled_input(g, d)?;
        let out = self.dnet.forward(g, b, x)?;
        let corr = g.narrow(out, 0, 1)?;
        let corr = g.scale(corr, self.data_scale);
        let raw = g.leaf(self.layout.tensor(d)?);
        let dh = g.add(raw, corr)?;
        let aux = g.narrow(out, 1, 1)?;
        let aux = g.scale(aux, self.data_scale);
        g.cat(&[dh, aux])
    }

    fn snet_graph(&self, g: &mut Graph, b: &Bound, d: &[f64]) -> Result<(Var, Var)> {
        let x = self.scaled_input(g, d)?;
        let out = self.snet.forward(g, b, x)?;
        let n = self.n_data();
        let ra = g.narrow(out, 0, 1)?;
        let ra = g.reshape(ra, vec![n])?;
        let rb = g.narrow(out, 1, 1)?;
        let rb = g.reshape(rb, vec![n])?;
        let sa = g.softplus(ra);
        let sb = g.softplus(rb);
        Ok((g.add_scalar(sa, ALPHA_FLOOR), g.add_scalar(sb, BETA_FLOOR)))
    }

    /// (ū_p, a) on `out` from the DNet output [2, rows, cols].
    fn inet_graph(&self, g: &mut Graph, b: &Bound, dnet_out: Var, out: Grid) -> Result<(Var, Var)> {
        let c = self.cec.layer(g, dnet_out)?;
        let e = self.enet.forward(g, b, c)?;
        let skip = g.narrow(c, self.cec.n_stages() - 1, 1)?;
        let corr = g.narrow(e, 0, 1)?;
        let mean = g.add(skip, corr)?;
        let ra = g.narrow(e, 1, 1)?;
        let s = g.sigmoid(ra);
        let s = g.scale(s, self.config.a_max - self.config.a_min);
        let a = g.add_scalar(s, self.config.a_min);
        let mean = rescale_layer(g, mean, self.native_grid, out)?;
        let a = rescale_layer(g, a, self.native_grid, out)?;
        let n = out.len();
        Ok((g.reshape(mean, vec![n])?, g.reshape(a, vec![n])?))
    }

    pub fn snet_forward(&self, d: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.snet_params.bind(&mut g);
        let (a, be) = self.snet_graph(&mut g, &b, d)?;
        Ok((g.value(a).data.clone(), g.value(be).data.clone()))
    }

    /// (d̂, auxiliary channel).
    pub fn dnet_forward(&self, d: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.dnet_params.bind(&mut g);
        let o = self.dnet_graph(&mut g, &b, d)?;
        let v = &g.value(o).data;
        let n = self.n_data();
        Ok((v[..n].to_vec(), v[n..].to_vec()))
    }

    pub fn cecinv_apply(&self, d_hat: &[f64]) -> Result<Vec<GridFunction>> {
        self.cec.apply(d_hat)
    }

    pub fn inet_forward(&self, d: &[f64], out: Grid) -> Result<(GridFunction, GridFunction)> {
        let mut g = Graph::new();
        let bd = self.dnet_params.bind(&mut g);
        let be = self.enet_params.bind(&mut g);
        let dn = self.dnet_graph(&mut g, &bd, d)?;
        let (u, a) = self.inet_graph(&mut g, &be, dn, out)?;
        Ok((GridFunction::new(out, g.value(u).data.clone())?, GridFunction::new(out, g.value(a).data.clone())?))
    }

    /// All four outputs on one tape (used by the loss and by gradient checks).
    pub fn outputs(&self, g: &mut Graph, d: &[f64], out: Grid) -> Result<(Outputs, [Bound; 3])> {
        let b = self.bind(g);
        let o = self.outputs_bound(g, [&b.d, &b.s, &b.e], d, out)?;
        Ok((o, [b.d, b.s, b.e]))
    }

    /// Same, with the (DNet, SNet, ENet) parameters already bound.
    pub fn outputs_bound(&self, g: &mut Graph, b: [&Bound; 3], d: &[f64], out: Grid) -> Result<Outputs> {
        let dn = self.dnet_graph(g, b[0], d)?;
        let (u_bar, a) = self.inet_graph(g, b[2], dn, out)?;
        let (alpha, beta) = self.snet_graph(g, b[1], d)?;
        Ok(Outputs { u_bar, a, alpha, beta })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let m = ModelManifest { config: self.config.clone(), forward: self.forward.clone(), data_scale: self.data_scale };
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&m)?)?;
        self.dnet_params.save(&dir.join("dnet"))?;
        self.snet_params.save(&dir.join("snet"))?;
        self.enet_params.save(&dir.join("enet"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: ModelManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let mut model = VinetModel::new(&m.config, &m.forward)?;
        model.data_scale = m.data_scale;
        model.dnet_params.load_into(&dir.join("dnet"))?;
        model.snet_params.load_into(&dir.join("snet"))?;
        model.enet_params.load_into(&dir.join("enet"))?;
        Ok(model)
    }
}

/// Grid-dependent pieces of I₁: S(a) = W·diag(a) + δK and S₀ = cW + δK.
#[derive(Clone, Debug)]
pub struct ElboGeometry {
    pub grid: Grid,
    pub op: ShiftedLaplacian,
    pub c: f64,
    logdet_s0: f64,
}

impl ElboGeometry {
    pub fn new(grid: Grid, prior: &PriorSpec) -> Result<Self> {
        let op = ShiftedLaplacian::new(grid, prior.delta);
        let logdet_s0 = op.factor(&vec![prior.c; grid.len()])?.logdet();
        Ok(ElboGeometry { grid, op, c: prior.c, logdet_s0 })
    }

    fn s0_apply(&self, e: &[f64]) -> Vec<f64> {
        let k = self.op.stiffness.matvec(e);
        (0..e.len()).map(|i| self.c * self.op.weights[i] * e[i] + self.op.delta * k[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.i1 + self.i2 + self.i3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboGrads {
    pub u_bar: Vec<f64>,
    pub a: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// I₂ = −KL(IG(α,β)‖IG(α⁰,β⁰)) and I₃ with a given squared residual, with their
/// (α, β) gradients.
pub fn sigma_terms(alpha: &[f64], beta: &[f64], r2: &[f64], ig0: &IGParams) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let (mut i2, mut i3) = (0.0, 0.0);
    let n = alpha.len();
    let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (a, b, a0, b0) = (alpha[i], beta[i], ig0.alpha[i], ig0.beta[i]);
        let (psi, psi1) = (digamma_raw(a), trigamma(a));
        i2 -= (a - a0) * psi - lgamma(a) + lgamma(a0) + a0 * (b.ln() - b0.ln()) + a * (b0 - b) / b;
        i3 += -0.5 * (b.ln() - psi) - 0.5 * (a / b) * r2[i];
        ga[i] = -((a - a0) * psi1 + b0 / b - 1.0) + 0.5 * psi1 - 0.5 * r2[i] / b;
        gb[i] = -(a0 / b - a * b0 / (b * b)) - 0.5 / b + 0.5 * a * r2[i] / (b * b);
    }
    (i2, i3, ga, gb)
}

/// Single-sample ELBO at frozen white noise η (nodal covariance W⁻¹):
/// ũ = ū_p + S(a)⁻¹Wη,
/// I₁ = log det S₀ − log det S(a) + ½‖η‖²_W − ½‖W⁻¹S₀(ũ − ū₀)‖²_W,
/// I₂ = −KL, I₃ = −½Σ(log β − ψ(α)) − ½Σ(α/β)(d − Hũ)².
/// The likelihood normalization omits (2π)^{−N_d/2}.
#[allow(clippy::too_many_arguments)]
pub fn elbo_value_grad(
    geo: &ElboGeometry,
    h: &dyn LinearForward,
    d: &[f64],
    u0: &[f64],
    ig0: &IGParams,
    u_bar: &[f64],
    a: &[f64],
    alpha: &[f64],
    beta: &[f64],
    eta: &[f64],
) -> Result<(ElboTerms, ElboGrads)> {
    let n = geo.grid.len();
    if [u0.len(), u_bar.len(), a.len(), eta.len()].iter().any(|&l| l != n) || alpha.len() != d.len() || beta.len() != d.len() {
        return Err(Error::shape("elbo", "inputs do not match the grid / data sizes"));
    }
    let w = &geo.op.weights;
    let f: BandLdl = geo.op.factor(a).map_err(|e| Error::Numerical(format!("posterior precision factorization failed: {e}")))?;
    let weta: Vec<f64> = eta.iter().zip(w).map(|(e, w)| e * w).collect();
    let x = f.solve(&weta);
    let ut: Vec<f64> = u_bar.iter().zip(&x).map(|(u, x)| u + x).collect();
    let e: Vec<f64> = ut.iter().zip(u0).map(|(u, v)| u - v).collect();
    let s0e = geo.s0_apply(&e);
    let t: Vec<f64> = s0e.iter().zip(w).map(|(s, w)| s / w).collect();
    let quad0 = 0.5 * s0e.iter().zip(&t).map(|(s, t)| s * t).sum::<f64>();
    let eta_w = 0.5 * eta.iter().zip(&weta).map(|(a, b)| a * b).sum::<f64>();
    let i1 = geo.logdet_s0 - f.logdet() + eta_w - quad0;
    let hu = h.apply(&GridFunction { grid: geo.grid, values: ut })?;
    let r: Vec<f64> = d.iter().zip(&hu).map(|(d, h)| d - h).collect();
    let r2: Vec<f64> = r.iter().map(|v| v * v).collect();
    let (i2, i3, ga, gb) = sigma_terms(alpha, beta, &r2, ig0);
    // ∂/∂ũ = −S₀W⁻¹S₀(ũ−ū₀) + W·H*((α/β)⊙r)
    let cr: Vec<f64> = r.iter().enumerate().map(|(i, r)| alpha[i] / beta[i] * r).collect();
    let hs = h.adjoint(&cr)?;
    let s0t = geo.s0_apply(&t);
    let gu: Vec<f64> = (0..n).map(|i| -s0t[i] + w[i] * hs.values[i]).collect();
    let sg = f.solve(&gu);
    let dinv = f.inverse_diagonal();
    let g_a: Vec<f64> = (0..n).map(|i| -w[i] * dinv[i] - w[i] * sg[i] * x[i]).collect();
    Ok((ElboTerms { i1, i2, i3 }, ElboGrads { u_bar: gu, a: g_a, alpha: ga, beta: gb }))
}

/// Everything the loss needs for one item besides the model.
pub struct LossContext<'a> {
    pub geo: &'a ElboGeometry,
    pub h: &'a dyn LinearForward,
    pub ig0: &'a IGParams,
}

/// −ELBO as a tape op on (ū_p, a, α, β) with frozen η.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss_op(g: &mut Graph, ctx: &LossContext, o: &Outputs, d: &[f64], u0: &[f64], eta: &[f64]) -> Result<(Var, ElboTerms)> {
    let (terms, gr) = elbo_value_grad(
        ctx.geo,
        ctx.h,
        d,
        u0,
        ctx.ig0,
        &g.value(o.u_bar).data,
        &g.value(o.a).data,
        &g.value(o.alpha).data,
        &g.value(o.beta).data,
        eta,
    )?;
    let ElboGrads { u_bar, a, alpha, beta } = gr;
    let v = g.custom(
        &[o.u_bar, o.a, o.alpha, o.beta],
        Tensor::scalar(-terms.total()),
        Box::new(move |gg| {
            let s = -gg[0];
            [&u_bar, &a, &alpha, &beta].iter().map(|v| v.iter().map(|x| x * s).collect()).collect()
        }),
    );
    Ok((v, terms))
}

/// Batch-average −ELBO with its term breakdown.
pub fn elbo_loss(
    model: &VinetModel,
    ctx: &LossContext,
    batch: &[TrainItem],
    etas: &[Vec<f64>],
) -> Result<(f64, ElboTerms, Vec<Vec<Vec<f64>>>)> {
    let mut total = 0.0;
    let mut terms = ElboTerms::default();
    let mut grads: Vec<Vec<Vec<f64>>> = vec![model.dnet_params.zero_grads(), model.snet_params.zero_grads(), model.enet_params.zero_grads()];
    let nb = batch.len() as f64;
    for (it, eta) in batch.iter().zip(etas) {
        let mut g = Graph::new();
        let (o, b) = model.outputs(&mut g, &it.d, ctx.geo.grid)?;
        let (l, t) = elbo_loss_op(&mut g, ctx, &o, &it.d, &it.u0.values, eta)?;
        total += g.value(l).data[0] / nb;
        terms.i1 += t.i1 / nb;
        terms.i2 += t.i2 / nb;
        terms.i3 += t.i3 / nb;
        let gr = g.backward(l)?;
        for (k, (bd, st)) in b.iter().zip([&model.dnet_params, &model.snet_params, &model.enet_params]).enumerate() {
            for (acc, gv) in grads[k].iter_mut().zip(st.grads(bd, &gr)) {
                acc.iter_mut().zip(gv).for_each(|(a, v)| *a += v / nb);
            }
        }
    }
    Ok((total, terms, grads))
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub d: Vec<f64>,
    pub d_clean: Vec<f64>,
    /// prior mean (the synthetic truth) on the training grid
    pub u0: GridFunction,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
    pub stage2_terms: Vec<ElboTerms>,
}

fn check_finite(v: f64, stage: &str, epoch: usize, items: &[usize], detail: &str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{stage} loss is {v} at epoch {epoch}, batch items {items:?} ({detail})")));
    }
    Ok(())
}

fn add_scaled(acc: &mut [Vec<f64>], g: Vec<Vec<f64>>, s: f64) {
    for (a, gv) in acc.iter_mut().zip(g) {
        a.iter_mut().zip(gv).for_each(|(x, v)| *x += s * v);
    }
}

/// Stage 1: DNet + SNet on MSE(d̂, d_clean) − (I₂ + I₃) with the residual
/// d − d̂ held fixed; stage 2: DNet frozen, ENet + SNet on −ELBO.
pub fn train(model: &mut VinetModel, items: &[TrainItem], h: &dyn LinearForward) -> Result<TrainTrace> {
    let cfg = model.config.clone();
    let grid = Grid::unit(cfg.train_grid);
    h.grid().check_same(&grid)?;
    let nd = model.n_data();
    if items.iter().any(|it| it.d.len() != nd || it.d_clean.len() != nd) {
        return Err(Error::shape("train", "item data length does not match the model layout"));
    }
    if !items.is_empty() && (cfg.stage1_epochs + cfg.stage2_epochs) > 0 {
        let s: f64 = items.iter().flat_map(|it| it.d.iter()).map(|v| v.abs()).sum::<f64>() / (items.len() * nd) as f64;
        if s > 0.0 {
            model.data_scale = s;
        }
    }
    let ig0 = cfg.hyper.build(nd)?;
    let geo = ElboGeometry::new(grid, &cfg.prior)?;
    let mut trace = TrainTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..items.len()).collect();

    let mut adam_d = AdamState::new(&model.dnet_params);
    let mut adam_s = AdamState::new(&model.snet_params);
    for epoch in 0..cfg.stage1_epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let nb = chunk.len() as f64;
            let mut gd = model.dnet_params.zero_grads();
            let mut gs = model.snet_params.zero_grads();
            for &i in chunk {
                let it = &items[i];
                let mut g = Graph::new();
                let bd = model.dnet_params.bind(&mut g);
                let bs = model.snet_params.bind(&mut g);
                let dn = model.dnet_graph(&mut g, &bd, &it.d)?;
                let dh = g.narrow(dn, 0, 1)?;
                let clean = g.leaf(model.layout.tensor(&it.d_clean)?);
                let diff = g.sub(dh, clean)?;
                let sq = g.mul(diff, diff)?;
                let mse = g.sum(sq);
                let mse = g.scale(mse, 1.0 / nd as f64);
                let (al, be) = model.snet_graph(&mut g, &bs, &it.d)?;
                let dhv = &g.value(dh).data;
                let r2: Vec<f64> = it.d.iter().zip(dhv).map(|(a, b)| (a - b).powi(2)).collect();
                let (i2, i3, ga, gb) = sigma_terms(&g.value(al).data, &g.value(be).data, &r2, &ig0);
                let sig = g.custom(
                    &[al, be],
                    Tensor::scalar(-(i2 + i3)),
                    Box::new(move |gg| vec![ga.iter().map(|v| -v * gg[0]).collect(), gb.iter().map(|v| -v * gg[0]).collect()]),
                );
                let loss = g.add(mse, sig)?;
                let lv = g.value(loss).data[0];
                check_finite(lv, "stage-1", epoch, chunk, &format!("mse {}, sigma terms {}", g.value(mse).data[0], -(i2 + i3)))?;
                epoch_loss += lv;
                let gr = g.backward(loss)?;
                add_scaled(&mut gd, model.dnet_params.grads(&bd, &gr), 1.0 / nb);
                add_scaled(&mut gs, model.snet_params.grads(&bs, &gr), 1.0 / nb);
            }
            adam_d.step(&mut model.dnet_params, &gd, lr)?;
            adam_s.step(&mut model.snet_params, &gs, lr)?;
        }
        trace.stage1.push(epoch_loss / items.len().max(1) as f64);
    }

    let ctx = LossContext { geo: &geo, h, ig0: &ig0 };
    let mut adam_e = AdamState::new(&model.enet_params);
    let mut eta_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eta_rng.set_stream(8);
    for epoch in 0..cfg.stage2_epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_terms = ElboTerms::default();
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let etas: Vec<Vec<f64>> = batch.iter().map(|_| white_noise(grid, &mut eta_rng).values).collect();
            let (l, t, grads) = elbo_loss(model, &ctx, &batch, &etas)?;
            check_finite(l, "stage-2", epoch, chunk, &format!("{t:?}"))?;
            let w = chunk.len() as f64;
            epoch_loss += l * w;
            epoch_terms.i1 += t.i1 * w;
            epoch_terms.i2 += t.i2 * w;
            epoch_terms.i3 += t.i3 * w;
            adam_s.step(&mut model.snet_params, &grads[1], lr)?;
            adam_e.step(&mut model.enet_params, &grads[2], lr)?;
        }
        let n = items.len().max(1) as f64;
        trace.stage2.push(epoch_loss / n);
        trace.stage2_terms.push(ElboTerms { i1: epoch_terms.i1 / n, i2: epoch_terms.i2 / n, i3: epoch_terms.i3 / n });
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub mean: GridFunction,
    pub a: GridFunction,
    pub pointwise_std: GridFunction,
    pub sigma_alpha: Vec<f64>,
    pub sigma_beta: Vec<f64>,
    pub noise_variance_estimate: Vec<f64>,
}

/// One network pass; the pointwise std is the nodal diagonal of (a + δL)⁻² by
/// banded factorization.
pub fn infer(model: &VinetModel, d: &[f64], out: Grid) -> Result<PosteriorSummary> {
    let (mean, a) = model.inet_forward(d, out)?;
    let (alpha, beta) = model.snet_forward(d)?;
    let cov = VariableCovariance::new(a.clone(), model.config.prior.delta, model.config.a_min, model.config.a_max)?;
    let pointwise_std = cov.pointwise_variance()?.map(|v| v.max(0.0).sqrt());
    let noise_variance_estimate = alpha.iter().zip(&beta).map(|(a, b)| b / (a - 1.0)).collect();
    Ok(PosteriorSummary { mean, a, pointwise_std, sigma_alpha: alpha, sigma_beta: beta, noise_variance_estimate })
}

/// The a-channel transform, for callers that need it outside a tape.
pub fn a_transform(raw: f64, a_min: f64, a_max: f64) -> f64 {
    a_min + (a_max - a_min) * sigmoid(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::{normal_eig, tsvd_invert};
    use crate::forward::SensorSet;
    use crate::grid::inner_l2;
    use crate::nn::grad_check;
    use rand::Rng;

    fn small_forward() -> ForwardConfig {
        ForwardConfig {
            model: ModelKind::Elliptic,
            alpha_pde: 0.01,
            kappas: vec![],
            pml: Default::default(),
            sensors: SensorConfig::Lattice { m: 8 },
            data_grid: 33,
            inv_grid: 17,
        }
    }

    fn small_config() -> VinetConfig {
        VinetConfig {
            channels: Channels { snet: 4, dnet: 4, enet: 4, fno_width: 6, fno_modes: 3 },
            native_grid: 16,
            train_grid: 17,
            cec: CecConfig { grid: 9, ..Default::default() },
            ..Default::default()
        }
    }

    fn rand_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(lo..hi)).collect()
    }

    #[test]
    fn transforms_respect_bounds() {
        let model = VinetModel::new(&small_config(), &small_forward()).unwrap();
        for seed in 0..3 {
            let d = rand_vec(64, -50.0, 50.0, seed);
            let (a, b) = model.snet_forward(&d).unwrap();
            assert!(a.iter().all(|&v| v > ALPHA_FLOOR - 1e-15) && b.iter().all(|&v| v > BETA_FLOOR * 0.999));
            let (_, af) = model.inet_forward(&d, Grid::unit(17)).unwrap();
            assert!(af.values.iter().all(|&v| v >= 1.0 && v <= 1e4));
        }
        assert_eq!(a_transform(-1e3, 1.0, 5.0), 1.0);
        assert_eq!(a_transform(1e3, 1.0, 5.0), 5.0);
    }

    #[test]
    fn untrained_dnet_is_identity_and_inference_deterministic() {
        let model = VinetModel::new(&small_config(), &small_forward()).unwrap();
        let d = rand_vec(64, 1.0, 3.0, 1);
        let (dh, aux) = model.dnet_forward(&d).unwrap();
        assert_eq!(dh, d);
        assert!(aux.iter().all(|v| *v == 0.0));
        let a = infer(&model, &d, Grid::unit(17)).unwrap();
        let b = infer(&model, &d, Grid::unit(17)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noise_variance_estimate.len(), 64);
        assert!(a.noise_variance_estimate.iter().all(|v| *v > 0.0));
        assert!(a.pointwise_std.values.iter().all(|v| *v >= 0.0));
        // native grid output: rescale is the identity map
        let (u16, _) = model.inet_forward(&d, Grid::unit(16)).unwrap();
        let (u33, _) = model.inet_forward(&d, Grid::unit(33)).unwrap();
        assert_eq!(crate::grid::rescale(&u16, &Grid::unit(33)), u33);
    }

    #[test]
    fn cecinv_matches_tsvd_and_is_linear() {
        let model = VinetModel::new(&small_config(), &small_forward()).unwrap();
        let grid = Grid::unit(9);
        let h = EllipticForward::new(grid, 0.01, SensorSet::lattice(8)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let eig = normal_eig(&h, 64, 10, 2, &mut r).unwrap();
        let d = rand_vec(64, -1.0, 1.0, 4);
        let lam1 = eig.values.iter().cloned().fold(0.0, f64::max);
        let a = model.cecinv_apply(&d).unwrap();
        let b = tsvd_invert(&d, &eig, &h, 0.2 * lam1).unwrap();
        let err = a[0].sub(&b).unwrap().max_abs();
        assert!(err < 1e-10 * b.max_abs().max(1.0), "{err}");
        let z = model.cecinv_apply(&vec![0.0; 64]).unwrap();
        assert!(z[0].values.iter().all(|v| *v == 0.0));
        let d2 = rand_vec(64, -1.0, 1.0, 5);
        let sum: Vec<f64> = d.iter().zip(&d2).map(|(a, b)| a + b).collect();
        let lhs = model.cecinv_apply(&sum).unwrap();
        let rhs = a[0].add(&model.cecinv_apply(&d2).unwrap()[0]).unwrap();
        assert!(lhs[0].sub(&rhs).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn i2_vanishes_at_prior_and_gradients_are_consistent() {
        let ig0 = IGParams::new(vec![2.0, 3.5], vec![0.5, 0.1]).unwrap();
        let (i2, _, _, _) = sigma_terms(&ig0.alpha, &ig0.beta, &[0.0, 0.0], &ig0);
        assert_eq!(i2, 0.0);
        let q = IGParams::new(vec![2.7, 1.3], vec![0.2, 0.9]).unwrap();
        let (i2, _, _, _) = sigma_terms(&q.alpha, &q.beta, &[0.0, 0.0], &ig0);
        assert!((i2 + crate::bayes::ig_kl(&q, &ig0)).abs() < 1e-13);
    }

    /// The toy problem: 2×2 grid, 2 sensors, dense H.
    struct Toy {
        grid: Grid,
        h: DenseForward,
        d: Vec<f64>,
        u0: Vec<f64>,
        prior: PriorSpec,
        ig0: IGParams,
    }

    fn toy() -> Toy {
        let grid = Grid::unit(2);
        let h = DenseForward::from_matrix(grid, 2, vec![0.9, 0.3, -0.2, 0.4, 0.1, -0.5, 0.7, 0.6]).unwrap();
        Toy {
            grid,
            h,
            d: vec![0.8, -0.3],
            u0: vec![0.2, -0.1, 0.4, 0.3],
            prior: PriorSpec { c: 1.5, delta: 0.3 },
            ig0: IGParams::new(vec![3.0, 2.5], vec![0.5, 0.8]).unwrap(),
        }
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let t = toy();
        let geo = ElboGeometry::new(t.grid, &t.prior).unwrap();
        let ub = vec![0.1, 0.5, -0.3, 0.2];
        let a = vec![2.0, 3.0, 1.5, 2.5];
        let al = vec![2.2, 4.0];
        let be = vec![0.3, 0.7];
        let eta = vec![0.7, -1.1, 0.4, 0.9];
        let f = |ub: &[f64], a: &[f64], al: &[f64], be: &[f64]| {
            elbo_value_grad(&geo, &t.h, &t.d, &t.u0, &t.ig0, ub, a, al, be, &eta).unwrap().0.total()
        };
        let (_, g) = elbo_value_grad(&geo, &t.h, &t.d, &t.u0, &t.ig0, &ub, &a, &al, &be, &eta).unwrap();
        let hh = 1e-6;
        let fd = |which: usize, i: usize| {
            let mut v = [ub.clone(), a.clone(), al.clone(), be.clone()];
            v[which][i] += hh;
            let p = f(&v[0], &v[1], &v[2], &v[3]);
            v[which][i] -= 2.0 * hh;
            let m = f(&v[0], &v[1], &v[2], &v[3]);
            (p - m) / (2.0 * hh)
        };
        for (which, an) in [&g.u_bar, &g.a, &g.alpha, &g.beta].iter().enumerate() {
            for (i, &x) in an.iter().enumerate() {
                let n = fd(which, i);
                assert!((x - n).abs() < 1e-6 * x.abs().max(1.0), "input {which}[{i}]: {x} vs {n}");
            }
        }
    }

    /// Gauss–Hermite nodes/weights for ∫ f(x) N(x; 0, 1) dx (probabilists').
    fn gh3() -> [(f64, f64); 3] {
        let s = 3f64.sqrt();
        [(-s, 1.0 / 6.0), (0.0, 2.0 / 3.0), (s, 1.0 / 6.0)]
    }

    /// E over η ~ N(0, W⁻¹) of a function of η, exact for quadratics.
    fn expect_eta(grid: Grid, f: impl Fn(&[f64]) -> f64) -> f64 {
        let w = grid.weights();
        let n = w.len();
        let q = gh3();
        let mut s = 0.0;
        for idx in 0..3usize.pow(n as u32) {
            let (mut k, mut wt) = (idx, 1.0);
            let mut eta = vec![0.0; n];
            for i in 0..n {
                let (x, qw) = q[k % 3];
                k /= 3;
                eta[i] = x / w[i].sqrt();
                wt *= qw;
            }
            s += wt * f(&eta);
        }
        s
    }

    /// log-σ trapezoid quadrature of ∫ g(σ) IG(σ; a, b) dσ.
    fn ig_expect(a: f64, b: f64, g: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi, n) = (-14.0f64, 8.0f64, 8000);
        let dt = (hi - lo) / n as f64;
        let mut s = 0.0;
        for k in 0..=n {
            let t = lo + k as f64 * dt;
            let sig = t.exp();
            let logp = a * b.ln() - lgamma(a) - (a + 1.0) * t - b / sig;
            let wk = if k == 0 || k == n { 0.5 } else { 1.0 };
            s += wk * (logp + t).exp() * g(sig);
        }
        s * dt
    }

    #[test]
    fn elbo_plus_kl_equals_log_evidence_on_toy_model() {
        let t = toy();
        let geo = ElboGeometry::new(t.grid, &t.prior).unwrap();
        let w = t.grid.weights();
        let n = 4;
        let ub = vec![0.1, 0.5, -0.3, 0.2];
        let a = vec![2.0, 3.0, 1.5, 2.5];
        let al = vec![2.2, 4.0];
        let be = vec![0.3, 0.7];
        // −loss averaged over the reparameterization noise
        let neg_loss = expect_eta(t.grid, |eta| {
            elbo_value_grad(&geo, &t.h, &t.d, &t.u0, &t.ig0, &ub, &a, &al, &be, eta).unwrap().0.total()
        });

        // dense Gaussians: nodal covariance S⁻¹WS⁻¹ for S = cW + δK or W·diag(a) + δK
        let sym = |diag: &[f64]| {
            let s = geo.op.assemble(diag);
            DMatrix::from_row_slice(n, n, &s.to_dense())
        };
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        let cov = |s: &DMatrix<f64>| {
            let si = s.clone().try_inverse().unwrap();
            &si * &wm * &si
        };
        let c0 = cov(&sym(&vec![t.prior.c; n]));
        let cp = cov(&sym(&a));
        let hm = DMatrix::from_row_slice(2, n, &t.h.matrix);
        let dv = DVector::from_vec(t.d.clone());
        let u0 = DVector::from_vec(t.u0.clone());
        let up = DVector::from_vec(ub.clone());
        let gauss_logpdf = |x: &DVector<f64>, m: &DVector<f64>, c: &DMatrix<f64>| {
            let ci = c.clone().try_inverse().unwrap();
            let r = x - m;
            -0.5 * (c.determinant() * (2.0 * std::f64::consts::PI).powi(x.len() as i32)).ln() - 0.5 * (r.transpose() * ci * &r)[0]
        };

        // log Z with likelihood det(Σ)^{-1/2}exp(−½‖Σ^{-1/2}(d − Hu)‖²): u marginalized exactly, σ by 2-D quadrature
        let hc = &hm * &c0 * hm.transpose();
        let mean_d = &hm * &u0;
        let (lo, hi, m) = (-14.0f64, 8.0f64, 1400);
        let dt = (hi - lo) / m as f64;
        let mut z = 0.0;
        for k1 in 0..=m {
            let t1 = lo + k1 as f64 * dt;
            let w1 = if k1 == 0 || k1 == m { 0.5 } else { 1.0 };
            let p1 = t.ig0.alpha[0] * t.ig0.beta[0].ln() - lgamma(t.ig0.alpha[0]) - t.ig0.alpha[0] * t1 - t.ig0.beta[0] / t1.exp();
            for k2 in 0..=m {
                let t2 = lo + k2 as f64 * dt;
                let w2 = if k2 == 0 || k2 == m { 0.5 } else { 1.0 };
                let p2 = t.ig0.alpha[1] * t.ig0.beta[1].ln() - lgamma(t.ig0.alpha[1]) - t.ig0.alpha[1] * t2 - t.ig0.beta[1] / t2.exp();
                let mut c = hc.clone();
                c[(0, 0)] += t1.exp();
                c[(1, 1)] += t2.exp();
                // N(d; Hū₀, HC₀Hᵀ + Σ)·(2π)^{N_d/2}
                let lg = gauss_logpdf(&dv, &mean_d, &c) + std::f64::consts::PI.mul_add(0.0, (2.0 * std::f64::consts::PI).ln());
                z += w1 * w2 * (lg + p1 + p2).exp();
            }
        }
        let log_z = (z * dt * dt).ln();

        // KL(ν ‖ μ^d) = E_ν[log ν − log p(u) − log p(σ) − log p(d|u,σ)] + log Z
        let cp_chol = cp.clone().cholesky().unwrap().l();
        let e_u = |f: &dyn Fn(&DVector<f64>) -> f64| {
            let q = gh3();
            let mut s = 0.0;
            for idx in 0..81usize {
                let (mut k, mut wt) = (idx, 1.0);
                let mut zv = DVector::zeros(n);
                for i in 0..n {
                    zv[i] = q[k % 3].0;
                    wt *= q[k % 3].1;
                    k /= 3;
                }
                s += wt * f(&(&up + &cp_chol * zv));
            }
            s
        };
        let e_gauss = e_u(&|u| gauss_logpdf(u, &up, &cp) - gauss_logpdf(u, &u0, &c0));
        let mut e_sigma = 0.0;
        let mut e_lik = 0.0;
        for i in 0..2 {
            let (aq, bq, a0, b0) = (al[i], be[i], t.ig0.alpha[i], t.ig0.beta[i]);
            let logq = |s: f64| aq * bq.ln() - lgamma(aq) - (aq + 1.0) * s.ln() - bq / s;
            let logp = |s: f64| a0 * b0.ln() - lgamma(a0) - (a0 + 1.0) * s.ln() - b0 / s;
            e_sigma += ig_expect(aq, bq, |s| logq(s) - logp(s));
            let e_log = ig_expect(aq, bq, |s| s.ln());
            let e_inv = ig_expect(aq, bq, |s| 1.0 / s);
            let e_r2 = e_u(&|u| (t.d[i] - (&hm * u)[i]).powi(2));
            e_lik += -0.5 * e_log - 0.5 * e_inv * e_r2;
        }
        let kl = e_gauss + e_sigma - e_lik + log_z;
        assert!(kl > 0.0);
        assert!((neg_loss + kl - log_z).abs() < 1e-4, "−loss + KL = {} vs log Z = {}", neg_loss + kl, log_z);
    }

    #[test]
    fn reparameterized_residual_matches_expectation() {
        let grid = Grid::unit(9);
        let h = EllipticForward::new(grid, 0.05, SensorSet::lattice(3)).unwrap();
        let dense = DenseForward::assemble(&h).unwrap();
        let geo = ElboGeometry::new(grid, &PriorSpec { c: 2.0, delta: 0.1 }).unwrap();
        let n = grid.len();
        let a: Vec<f64> = (0..n).map(|i| 1.0 + 0.02 * i as f64).collect();
        let ub: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let d = vec![0.5; 9];
        let f = geo.op.factor(&a).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let draws = 10_000;
        let mut acc = vec![0.0; 9];
        for _ in 0..draws {
            let eta = white_noise(grid, &mut r);
            let wx: Vec<f64> = eta.values.iter().zip(&geo.op.weights).map(|(e, w)| e * w).collect();
            let x = f.solve(&wx);
            let ut: Vec<f64> = ub.iter().zip(&x).map(|(u, x)| u + x).collect();
            let hu = dense.matvec(&ut);
            for i in 0..9 {
                acc[i] += (d[i] - hu[i]).powi(2) / draws as f64;
            }
        }
        // analytic: (d − Hū)² + (H S⁻¹WS⁻¹ Hᵀ)_ii
        let s = DMatrix::from_row_slice(n, n, &geo.op.assemble(&a).to_dense());
        let si = s.try_inverse().unwrap();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(geo.op.weights.clone()));
        let hm = DMatrix::from_row_slice(9, n, &dense.matrix);
        let hc = &hm * (&si * wm * &si) * hm.transpose();
        let hu = dense.matvec(&ub);
        for i in 0..9 {
            let exact = (d[i] - hu[i]).powi(2) + hc[(i, i)];
            assert!((acc[i] / exact - 1.0).abs() < 0.02, "sensor {i}: {} vs {}", acc[i], exact);
        }
    }

    #[test]
    fn full_loss_gradient_passes_fd_check() {
        let cfg = small_config();
        let fwd = small_forward();
        let model = VinetModel::new(&cfg, &fwd).unwrap();
        let grid = Grid::unit(17);
        let h = EllipticForward::new(grid, 0.01, SensorSet::lattice(8)).unwrap();
        let geo = ElboGeometry::new(grid, &cfg.prior).unwrap();
        let ig0 = cfg.hyper.build(64).unwrap();
        let u0 = GridFunction::from_fn(grid, |x, y| 2.0 + 0.3 * x - 0.2 * y);
        let d: Vec<f64> = h.apply(&u0).unwrap().iter().enumerate().map(|(i, v)| v * (1.0 + 0.05 * ((i * 7 % 11) as f64 - 5.0) / 5.0)).collect();
        let eta = white_noise(grid, &mut ChaCha8Rng::seed_from_u64(2)).values;
        let ctx = LossContext { geo: &geo, h: &h, ig0: &ig0 };
        // perturb the zero-initialized heads so every path carries gradient
        let mut m = model.clone();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for st in [&mut m.enet_params, &mut m.snet_params] {
            for t in st.tensors.iter_mut() {
                t.data.iter_mut().for_each(|v| *v += r.gen_range(-0.05..0.05));
            }
        }
        // check the ENet and SNet slices through the whole model
        for which in [1usize, 2] {
            let base = m.clone();
            let store = if which == 1 { base.snet_params.clone() } else { base.enet_params.clone() };
            let rep = grad_check(
                &store,
                &|g: &mut Graph, b: &Bound| {
                    let bd = base.dnet_params.bind(g);
                    let dn = base.dnet_graph(g, &bd, &d)?;
                    let (o, _) = if which == 1 {
                        let be = base.enet_params.bind(g);
                        let (u, a) = base.inet_graph(g, &be, dn, grid)?;
                        let (al, bt) = base.snet_graph(g, b, &d)?;
                        (Outputs { u_bar: u, a, alpha: al, beta: bt }, ())
                    } else {
                        let (u, a) = base.inet_graph(g, b, dn, grid)?;
                        let bs = base.snet_params.bind(g);
                        let (al, bt) = base.snet_graph(g, &bs, &d)?;
                        (Outputs { u_bar: u, a, alpha: al, beta: bt }, ())
                    };
                    Ok(elbo_loss_op(g, &ctx, &o, &d, &u0.values, &eta)?.0)
                },
                1e-5,
                1e-3,
                Some(6),
            )
            .unwrap();
            assert!(rep.passed, "{:?}", rep.per_param);
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged_and_training_is_deterministic() {
        let mut cfg = small_config();
        cfg.stage1_epochs = 0;
        cfg.stage2_epochs = 0;
        let fwd = small_forward();
        let grid = Grid::unit(17);
        let h = EllipticForward::new(grid, 0.01, SensorSet::lattice(8)).unwrap();
        let items: Vec<TrainItem> = (0..3)
            .map(|k| {
                let u = GridFunction::from_fn(grid, |x, y| 2.0 + 0.1 * k as f64 * x * y);
                let d = h.apply(&u).unwrap();
                TrainItem { d: d.clone(), d_clean: d, u0: u }
            })
            .collect();
        let mut m = VinetModel::new(&cfg, &fwd).unwrap();
        let before = m.clone();
        let tr = train(&mut m, &items, &h).unwrap();
        assert!(tr.stage1.is_empty() && tr.stage2.is_empty());
        assert_eq!(m.enet_params, before.enet_params);
        assert_eq!(m.dnet_params, before.dnet_params);

        cfg.stage1_epochs = 1;
        cfg.stage2_epochs = 2;
        cfg.batch = 2;
        let run = || {
            let mut m = VinetModel::new(&cfg, &fwd).unwrap();
            let tr = train(&mut m, &items, &h).unwrap();
            (tr, m.enet_params)
        };
        let (t1, p1) = run();
        let (t2, p2) = run();
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
        assert!(t1.stage2.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = small_config();
        cfg.enet = EnetKind::Fno;
        let mut m = VinetModel::new(&cfg, &small_forward()).unwrap();
        m.data_scale = 1.7;
        m.enet_params.tensors[0].data[0] = 0.123;
        let dir = std::env::temp_dir().join(format!("vinet-model-{}", std::process::id()));
        m.save(&dir).unwrap();
        let back = VinetModel::load(&dir).unwrap();
        assert_eq!(back.enet_params, m.enet_params);
        assert_eq!(back.data_scale, 1.7);
        let d = rand_vec(64, 1.0, 2.0, 3);
        assert_eq!(infer(&back, &d, Grid::unit(17)).unwrap(), infer(&m, &d, Grid::unit(17)).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn helmholtz_layout_and_cecinv_stages() {
        let fwd = ForwardConfig {
            model: ModelKind::Helmholtz,
            alpha_pde: 0.01,
            kappas: vec![2.0, 4.0],
            pml: Default::default(),
            sensors: SensorConfig::Boundary { per_side: 4 },
            data_grid: 33,
            inv_grid: 17,
        };
        let mut cfg = small_config();
        cfg.cec.grid = 17;
        let m = VinetModel::new(&cfg, &fwd).unwrap();
        assert_eq!(m.layout, DataLayout { rows: 4, cols: 16 });
        assert_eq!(m.cec.n_stages(), 2);
        // the first stage ignores the second frequency's data
        let mut d = vec![0.0; 64];
        d[40] = 1.0;
        let s = m.cecinv_apply(&d).unwrap();
        assert!(s[0].max_abs() == 0.0 && s[1].max_abs() > 0.0);
        let _ = inner_l2(&s[1], &s[1]).unwrap();
    }
}
