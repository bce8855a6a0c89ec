//! Deep-unfolded blind super-resolution iteration.
//!
//! Each stage runs three sub-steps in Gauss-Seidel order: an explicit
//! gradient step on the kernel followed by a learned corrective network and
//! a simplex projection (K-Net), the same pattern on the smooth image
//! component with KAN channel-mixing layers (O-Net), and on the sparse
//! component with a small two-level U-shaped conv net (S-Net). All three
//! corrective networks are residual, so with zero parameters and vanishing
//! step sizes the iteration reduces to plain projected gradient descent.
//!
//! Every step exists twice: a plain form operating on concrete arrays (used
//! for inference) and a graph form building onto a [`Tape`] (used for
//! training). The two share the same numeric cores and agree bitwise.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{Cube, Kernel};
use crate::degrade::{bicubic_upsample, conv_down, conv_up_transpose, gaussian_sep_init};
use crate::error::{KanoError, Result};
use crate::kan::{
    kan1d_apply, kan2d_apply, kan_cube_graph, kan_stack_graph, KanLayer, KanLayerVars, KanStack,
};
use crate::linops;
use crate::spline::{silu, GridSpec};
use crate::tape::{Tape, Var};

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus` for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    y.exp_m1().ln()
}

/// Which network realizes the kernel corrector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Kan,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub scale: usize,
    pub kernel_size: usize,
    pub stages: usize,
    pub backbone: Backbone,
    pub grid: GridSpec,
}

impl ModelConfig {
    pub fn new(channels: usize, scale: usize, kernel_size: usize, stages: usize) -> Self {
        ModelConfig {
            channels,
            scale,
            kernel_size,
            stages,
            backbone: Backbone::Kan,
            grid: GridSpec::default_unit(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(KanoError::Config("channels must be >= 1".into()));
        }
        if !matches!(self.scale, 1 | 2 | 3 | 4 | 8) {
            return Err(KanoError::Config(format!(
                "scale must be one of 1,2,3,4,8 (got {})",
                self.scale
            )));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(KanoError::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(1..=8).contains(&self.stages) {
            return Err(KanoError::Config(format!(
                "stage count must lie in 1..=8, got {}",
                self.stages
            )));
        }
        Ok(())
    }
}

/// Current iterate: blur kernel, smooth component, sparse component.
/// The reconstruction is always `X = O + S` by construction.
#[derive(Debug, Clone)]
pub struct UnfoldState {
    pub k: Kernel,
    pub o: Cube,
    pub s: Cube,
    pub t: usize,
}

impl UnfoldState {
    pub fn x(&self) -> Cube {
        Cube {
            data: &self.o.data + &self.s.data,
        }
    }
}

/// `X0 = bicubic(Y)`, `O0 = X0`, `S0 = 0`, `K0` a unit-sigma separable
/// Gaussian.
pub fn init_state(y: &Cube, scale: usize, kernel_size: usize) -> Result<UnfoldState> {
    let x0 = bicubic_upsample(y, scale)?;
    let (c, h, w) = x0.dim();
    Ok(UnfoldState {
        k: gaussian_sep_init(kernel_size)?,
        o: x0,
        s: Cube::zeros(c, h, w),
        t: 0,
    })
}

/// Data-term residual `r = Y - K conv_down (O + S)`.
pub fn residual(state: &UnfoldState, y: &Cube, scale: usize) -> Result<Cube> {
    let pred = conv_down(&state.x(), &state.k, scale)?;
    if pred.dim() != y.dim() {
        return Err(KanoError::shape(
            "residual",
            format!("prediction {:?} vs observation {:?}", pred.dim(), y.dim()),
        ));
    }
    Ok(Cube {
        data: &y.data - &pred.data,
    })
}

/// True gradient of `0.5 ||r||^2` with respect to the kernel entries.
pub fn grad_k(state: &UnfoldState, y: &Cube, scale: usize) -> Result<Array2<f64>> {
    let r = residual(state, y, scale)?;
    let g = linops::kernel_grad_core(&state.x().data, &r.data, scale, state.k.size());
    Ok(-g)
}

/// True gradient of the data term with respect to `O`.
pub fn grad_o(state: &UnfoldState, y: &Cube, scale: usize) -> Result<Cube> {
    let r = residual(state, y, scale)?;
    let up = conv_up_transpose(&r, &state.k, scale)?;
    Ok(Cube { data: -up.data })
}

/// True gradient with respect to `S`; the caller must already have written
/// the stage-`t` kernel and `O` into the state (Gauss-Seidel ordering).
pub fn grad_s(state: &UnfoldState, y: &Cube, scale: usize) -> Result<Cube> {
    grad_o(state, y, scale)
}

/// Clamp negatives to zero and renormalize; all-nonpositive input falls
/// back to the uniform kernel.
pub fn project_simplex(raw: &Array2<f64>) -> Kernel {
    let pos = raw.mapv(|v| v.max(0.0));
    let sum: f64 = pos.iter().sum();
    if sum <= 0.0 {
        Kernel::uniform(raw.dim().0)
    } else {
        Kernel::new(pos / sum).expect("clamp-normalize lands on the simplex")
    }
}

/// Graph counterpart of [`project_simplex`]. The uniform fallback is a
/// constant leaf, so no gradient flows through it.
pub fn project_simplex_graph(raw: &Var) -> Var {
    let pos = raw.relu();
    let total: f64 = pos.value().iter().sum();
    if total <= 0.0 {
        let k = raw.shape()[0];
        raw.tape()
            .leaf(Array2::from_elem((k, k), 1.0 / (k * k) as f64).into_dyn())
    } else {
        let s = pos.sum();
        pos.div_scalar(&s)
    }
}

// ---- network parameter containers ---------------------------------------

/// Dense layer for the MLP kernel backbone; bias kept as a `(1, d_out)` row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpLayer {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl MlpLayer {
    fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        MlpLayer {
            w: Array2::from_shape_fn((d_in, d_out), |_| dist.sample(rng)),
            b: Array2::zeros((1, d_out)),
        }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        MlpLayer {
            w: Array2::zeros((d_in, d_out)),
            b: Array2::zeros((1, d_out)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum KernelNet {
    Kan(KanStack),
    Mlp(Vec<MlpLayer>),
}

impl KernelNet {
    pub fn param_count(&self) -> usize {
        match self {
            KernelNet::Kan(s) => s.param_count(),
            KernelNet::Mlp(ls) => ls.iter().map(MlpLayer::param_count).sum(),
        }
    }

    /// Correction term on a `(1, d)` flattened kernel.
    fn forward(&self, flat: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            KernelNet::Kan(stack) => stack.forward(flat),
            KernelNet::Mlp(layers) => {
                let mut cur = flat.clone();
                for (i, l) in layers.iter().enumerate() {
                    cur = cur.dot(&l.w) + &l.b;
                    if i + 1 < layers.len() {
                        cur.mapv_inplace(silu);
                    }
                }
                Ok(cur)
            }
        }
    }
}

/// Hidden width of a depth-2 MLP `d -> m -> d` whose parameter count
/// matches the depth-2 KAN stack over the same dimension.
pub fn mlp_matched_width(d: usize, n_basis: usize) -> usize {
    let p_kan = 2 * d * d * (2 + n_basis);
    ((p_kan - d) as f64 / (2 * d + 1) as f64).round() as usize
}

/// Two-level U-shape: encode, pool, middle, nearest-upsample, skip concat,
/// decode, output conv. All convs 3x3, bias-free, SiLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SNet {
    pub enc: Array4<f64>,
    pub mid: Array4<f64>,
    pub dec: Array4<f64>,
    pub fin: Array4<f64>,
}

fn conv_init<R: Rng>(cout: usize, cin: usize, rng: &mut R) -> Array4<f64> {
    let std = (2.0 / (cin * 9) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array4::from_shape_fn((cout, cin, 3, 3), |_| dist.sample(rng))
}

impl SNet {
    fn init<R: Rng>(c: usize, rng: &mut R) -> Self {
        SNet {
            enc: conv_init(2 * c, c, rng),
            mid: conv_init(2 * c, 2 * c, rng),
            dec: conv_init(2 * c, 4 * c, rng),
            fin: conv_init(c, 2 * c, rng),
        }
    }

    fn zeros(c: usize) -> Self {
        SNet {
            enc: Array4::zeros((2 * c, c, 3, 3)),
            mid: Array4::zeros((2 * c, 2 * c, 3, 3)),
            dec: Array4::zeros((2 * c, 4 * c, 3, 3)),
            fin: Array4::zeros((c, 2 * c, 3, 3)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.enc.len() + self.mid.len() + self.dec.len() + self.fin.len()
    }

    fn forward(&self, s_in: &Cube) -> Result<Cube> {
        let (_, h, w) = s_in.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(KanoError::shape(
                "snet",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let e = linops::conv2d_core(&s_in.data, &self.enc).mapv(silu);
        let p = linops::avg_pool2(&e);
        let m = linops::conv2d_core(&p, &self.mid).mapv(silu);
        let u = linops::up_nearest2(&m);
        let cat = ndarray::concatenate(Axis(0), &[e.view(), u.view()]).unwrap();
        let d = linops::conv2d_core(&cat, &self.dec).mapv(silu);
        let f = linops::conv2d_core(&d, &self.fin);
        Ok(Cube {
            data: &s_in.data + &f,
        })
    }
}

/// All learnable quantities of one unfolding stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageParams {
    pub gamma1_raw: f64,
    pub gamma2_raw: f64,
    pub gamma3_raw: f64,
    pub knet: KernelNet,
    pub onet2d: Vec<KanLayer>,
    pub onet1d: KanStack,
    pub snet: SNet,
}

impl StageParams {
    pub fn gamma1(&self) -> f64 {
        softplus(self.gamma1_raw)
    }
    pub fn gamma2(&self) -> f64 {
        softplus(self.gamma2_raw)
    }
    pub fn gamma3(&self) -> f64 {
        softplus(self.gamma3_raw)
    }

    fn knet_apply(&self, k_in: &Array2<f64>) -> Result<Array2<f64>> {
        let k = k_in.dim().0;
        let flat = k_in
            .clone()
            .into_shape_with_order((1, k * k))
            .unwrap();
        let corr = self.knet.forward(&flat)?;
        Ok(k_in + &corr.into_shape_with_order((k, k)).unwrap())
    }

    fn onet_apply(&self, o_in: &Cube) -> Result<Cube> {
        let mut cur = o_in.clone();
        for l in &self.onet2d {
            cur = kan2d_apply(&cur, l)?;
        }
        cur = kan1d_apply(&cur, &self.onet1d)?;
        Ok(Cube {
            data: &cur.data + &o_in.data,
        })
    }

    pub fn param_count(&self) -> usize {
        3 + self.knet.param_count()
            + self.onet2d.iter().map(KanLayer::param_count).sum::<usize>()
            + self.onet1d.param_count()
            + self.snet.param_count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KanoModel {
    pub config: ModelConfig,
    pub stages: Vec<StageParams>,
}

/// The residual head starts at zero so the initial kernel trajectory is
/// plain projected gradient descent; a random head perturbs the kernel
/// estimate enough to spoil recovery at toy training scales.
fn knet_init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> KernelNet {
    let d = config.kernel_size * config.kernel_size;
    match config.backbone {
        Backbone::Kan => {
            let l1 = KanLayer::init(d, d, config.grid, rng);
            let l2 = KanLayer::zeros(d, d, config.grid);
            KernelNet::Kan(KanStack::new(vec![l1, l2]).unwrap())
        }
        Backbone::Mlp => {
            let m = mlp_matched_width(d, config.grid.n_basis());
            let l1 = MlpLayer::init(d, m, rng);
            let l2 = MlpLayer::zeros(m, d);
            KernelNet::Mlp(vec![l1, l2])
        }
    }
}

impl KanoModel {
    /// Fresh randomly initialized model. Mixing weights scale with 1/sqrt(d_in)
    /// so early corrections stay modest; see [`KanoModel::passthrough`]
    /// for the exact plain-gradient-descent configuration.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let g = config.grid;
        let raw = softplus_inv(0.1);
        let stages = (0..config.stages)
            .map(|_| StageParams {
                gamma1_raw: raw,
                gamma2_raw: raw,
                gamma3_raw: raw,
                knet: knet_init(&config, &mut rng),
                onet2d: vec![
                    KanLayer::init(c, 2 * c, g, &mut rng),
                    KanLayer::init(2 * c, 2 * c, g, &mut rng),
                    KanLayer::init(2 * c, 2 * c, g, &mut rng),
                    KanLayer::init_head(2 * c, c, g, &mut rng),
                ],
                onet1d: KanStack::new(vec![
                    KanLayer::init(c, 2 * c, g, &mut rng),
                    KanLayer::init_head(2 * c, c, g, &mut rng),
                ])
                .unwrap(),
                snet: SNet::init(c, &mut rng),
            })
            .collect();
        Ok(KanoModel { config, stages })
    }

    /// All-zero networks and effectively zero step sizes: each stage is the
    /// identity on a consistent state.
    pub fn passthrough(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let d = config.kernel_size * config.kernel_size;
        let g = config.grid;
        let knet = match config.backbone {
            Backbone::Kan => KernelNet::Kan(
                KanStack::new(vec![KanLayer::zeros(d, d, g), KanLayer::zeros(d, d, g)]).unwrap(),
            ),
            Backbone::Mlp => {
                let m = mlp_matched_width(d, g.n_basis());
                KernelNet::Mlp(vec![MlpLayer::zeros(d, m), MlpLayer::zeros(m, d)])
            }
        };
        let stages = (0..config.stages)
            .map(|_| StageParams {
                gamma1_raw: -40.0,
                gamma2_raw: -40.0,
                gamma3_raw: -40.0,
                knet: knet.clone(),
                onet2d: vec![
                    KanLayer::zeros(c, 2 * c, g),
                    KanLayer::zeros(2 * c, 2 * c, g),
                    KanLayer::zeros(2 * c, 2 * c, g),
                    KanLayer::zeros(2 * c, c, g),
                ],
                onet1d: KanStack::new(vec![
                    KanLayer::zeros(c, 2 * c, g),
                    KanLayer::zeros(2 * c, c, g),
                ])
                .unwrap(),
                snet: SNet::zeros(c),
            })
            .collect();
        Ok(KanoModel { config, stages })
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(StageParams::param_count).sum()
    }

    /// Every learnable tensor in a fixed traversal order (gammas first,
    /// then K-Net, O-Net 2D, O-Net 1D, S-Net per stage). [`ModelVars`]
    /// mirrors the same order.
    pub fn params_flat(&self) -> Vec<ArrayD<f64>> {
        let mut out = Vec::new();
        for st in &self.stages {
            for g in [st.gamma1_raw, st.gamma2_raw, st.gamma3_raw] {
                out.push(ArrayD::from_elem(IxDyn(&[]), g));
            }
            match &st.knet {
                KernelNet::Kan(stack) => {
                    for l in &stack.layers {
                        out.push(l.wb.clone().into_dyn());
                        out.push(l.ws.clone().into_dyn());
                        out.push(l.coef.clone().into_dyn());
                    }
                }
                KernelNet::Mlp(layers) => {
                    for l in layers {
                        out.push(l.w.clone().into_dyn());
                        out.push(l.b.clone().into_dyn());
                    }
                }
            }
            for l in st.onet2d.iter().chain(st.onet1d.layers.iter()) {
                out.push(l.wb.clone().into_dyn());
                out.push(l.ws.clone().into_dyn());
                out.push(l.coef.clone().into_dyn());
            }
            out.push(st.snet.enc.clone().into_dyn());
            out.push(st.snet.mid.clone().into_dyn());
            out.push(st.snet.dec.clone().into_dyn());
            out.push(st.snet.fin.clone().into_dyn());
        }
        out
    }

    /// Inverse of [`KanoModel::params_flat`].
    pub fn set_params_flat(&mut self, params: &[ArrayD<f64>]) -> Result<()> {
        let mut it = params.iter();
        let mut next = |shape: &[usize]| -> Result<ArrayD<f64>> {
            let a = it
                .next()
                .ok_or_else(|| KanoError::Invalid("too few parameter tensors".into()))?;
            if a.shape() != shape {
                return Err(KanoError::shape(
                    "set_params_flat",
                    format!("expected {shape:?}, got {:?}", a.shape()),
                ));
            }
            Ok(a.clone())
        };
        for st in &mut self.stages {
            st.gamma1_raw = *next(&[])?.iter().next().unwrap();
            st.gamma2_raw = *next(&[])?.iter().next().unwrap();
            st.gamma3_raw = *next(&[])?.iter().next().unwrap();
            match &mut st.knet {
                KernelNet::Kan(stack) => {
                    for l in &mut stack.layers {
                        l.wb = next(l.wb.shape())?.into_dimensionality::<Ix2>().unwrap();
                        l.ws = next(l.ws.shape())?.into_dimensionality::<Ix2>().unwrap();
                        l.coef = next(l.coef.shape())?.into_dimensionality::<Ix2>().unwrap();
                    }
                }
                KernelNet::Mlp(layers) => {
                    for l in layers {
                        l.w = next(l.w.shape())?.into_dimensionality::<Ix2>().unwrap();
                        l.b = next(l.b.shape())?.into_dimensionality::<Ix2>().unwrap();
                    }
                }
            }
            for l in st
                .onet2d
                .iter_mut()
                .chain(st.onet1d.layers.iter_mut())
            {
                l.wb = next(l.wb.shape())?.into_dimensionality::<Ix2>().unwrap();
                l.ws = next(l.ws.shape())?.into_dimensionality::<Ix2>().unwrap();
                l.coef = next(l.coef.shape())?.into_dimensionality::<Ix2>().unwrap();
            }
            for arr in [
                &mut st.snet.enc,
                &mut st.snet.mid,
                &mut st.snet.dec,
                &mut st.snet.fin,
            ] {
                *arr = next(arr.shape())?
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
            }
        }
        if it.next().is_some() {
            return Err(KanoError::Invalid("too many parameter tensors".into()));
        }
        Ok(())
    }
}

// ---- plain stage steps ----------------------------------------------------

/// Gradient step on the kernel, corrective network, simplex projection.
pub fn knet_step(state: &UnfoldState, y: &Cube, model: &KanoModel, t: usize) -> Result<Kernel> {
    let st = &model.stages[t];
    let g = grad_k(state, y, model.config.scale)?;
    let k_in = state.k.values() - &(g * st.gamma1());
    let raw = st.knet_apply(&k_in)?;
    Ok(project_simplex(&raw))
}

/// Gradient step on `O` (with the stage-`t` kernel already in the state)
/// followed by the KAN corrective network with residual connection.
pub fn onet_step(state: &UnfoldState, y: &Cube, model: &KanoModel, t: usize) -> Result<Cube> {
    let st = &model.stages[t];
    let g = grad_o(state, y, model.config.scale)?;
    let o_in = Cube {
        data: &state.o.data - &(g.data * st.gamma2()),
    };
    st.onet_apply(&o_in)
}

/// Gradient step on `S` (kernel and `O` already updated) followed by the
/// U-shaped corrective network.
pub fn snet_step(state: &UnfoldState, y: &Cube, model: &KanoModel, t: usize) -> Result<Cube> {
    let st = &model.stages[t];
    let g = grad_s(state, y, model.config.scale)?;
    let s_in = Cube {
        data: &state.s.data - &(g.data * st.gamma3()),
    };
    st.snet.forward(&s_in)
}

/// Everything a stage produced, retained for loss and diagnostics.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub k: Kernel,
    pub o: Cube,
    pub s: Cube,
    pub x: Cube,
}

/// Full plain-inference pipeline: initialize from `Y`, run all stages.
pub fn run_unfolding(y: &Cube, model: &KanoModel) -> Result<Vec<StageOutput>> {
    model.config.validate()?;
    let mut state = init_state(y, model.config.scale, model.config.kernel_size)?;
    let mut out = Vec::with_capacity(model.config.stages);
    for t in 0..model.config.stages {
        state.k = knet_step(&state, y, model, t)?;
        state.o = onet_step(&state, y, model, t)?;
        state.s = snet_step(&state, y, model, t)?;
        state.t = t + 1;
        out.push(StageOutput {
            k: state.k.clone(),
            o: state.o.clone(),
            s: state.s.clone(),
            x: state.x(),
        });
    }
    Ok(out)
}

/// Per-stage reconstruction errors against ground truth. `mse_s` measures
/// the sparse component against zero (its corrective role has no target).
#[derive(Debug, Clone, Serialize)]
pub struct StageDiag {
    pub stage: usize,
    pub mse_o: f64,
    pub mse_s: f64,
    pub mse_x: f64,
    pub kernel_mse: f64,
}

pub fn stage_diagnostics(stages: &[StageOutput], x_gt: &Cube, k_gt: &Kernel) -> Vec<StageDiag> {
    let n = x_gt.data.len() as f64;
    stages
        .iter()
        .enumerate()
        .map(|(i, s)| StageDiag {
            stage: i + 1,
            mse_o: (&s.o.data - &x_gt.data).mapv(|v| v * v).sum() / n,
            mse_s: s.s.data.mapv(|v| v * v).sum() / n,
            mse_x: (&s.x.data - &x_gt.data).mapv(|v| v * v).sum() / n,
            kernel_mse: s.k.mse(k_gt),
        })
        .collect()
}

// ---- graph construction ---------------------------------------------------

pub enum KernelNetVars {
    Kan(Vec<KanLayerVars>),
    Mlp(Vec<(Var, Var)>),
}

pub struct StageVars {
    pub g1: Var,
    pub g2: Var,
    pub g3: Var,
    pub knet: KernelNetVars,
    pub onet2d: Vec<KanLayerVars>,
    pub onet1d: Vec<KanLayerVars>,
    pub snet: [Var; 4],
}

/// Leaf handles for every model parameter, in [`KanoModel::params_flat`]
/// order.
pub struct ModelVars {
    pub stages: Vec<StageVars>,
}

impl ModelVars {
    pub fn leaves(tape: &Tape, model: &KanoModel) -> Self {
        let stages = model
            .stages
            .iter()
            .map(|st| {
                let g1 = tape.scalar(st.gamma1_raw);
                let g2 = tape.scalar(st.gamma2_raw);
                let g3 = tape.scalar(st.gamma3_raw);
                let knet = match &st.knet {
                    KernelNet::Kan(stack) => KernelNetVars::Kan(
                        stack
                            .layers
                            .iter()
                            .map(|l| KanLayerVars::leaves(tape, l))
                            .collect(),
                    ),
                    KernelNet::Mlp(layers) => KernelNetVars::Mlp(
                        layers
                            .iter()
                            .map(|l| {
                                (
                                    tape.leaf(l.w.clone().into_dyn()),
                                    tape.leaf(l.b.clone().into_dyn()),
                                )
                            })
                            .collect(),
                    ),
                };
                let onet2d = st
                    .onet2d
                    .iter()
                    .map(|l| KanLayerVars::leaves(tape, l))
                    .collect();
                let onet1d = st
                    .onet1d
                    .layers
                    .iter()
                    .map(|l| KanLayerVars::leaves(tape, l))
                    .collect();
                let snet = [
                    tape.leaf(st.snet.enc.clone().into_dyn()),
                    tape.leaf(st.snet.mid.clone().into_dyn()),
                    tape.leaf(st.snet.dec.clone().into_dyn()),
                    tape.leaf(st.snet.fin.clone().into_dyn()),
                ];
                StageVars {
                    g1,
                    g2,
                    g3,
                    knet,
                    onet2d,
                    onet1d,
                    snet,
                }
            })
            .collect();
        ModelVars { stages }
    }

    /// Reassemble from an externally supplied var list in
    /// [`KanoModel::params_flat`] order, e.g. for finite-difference checks
    /// where the leaves are created by the caller.
    pub fn from_flat(flat: &[Var], model: &KanoModel) -> Self {
        let mut it = flat.iter().cloned();
        let mut n = || it.next().expect("flat var list too short");
        let stages = model
            .stages
            .iter()
            .map(|st| {
                let g1 = n();
                let g2 = n();
                let g3 = n();
                let knet = match &st.knet {
                    KernelNet::Kan(stack) => KernelNetVars::Kan(
                        stack
                            .layers
                            .iter()
                            .map(|l| KanLayerVars {
                                grid: l.grid,
                                wb: n(),
                                ws: n(),
                                coef: n(),
                            })
                            .collect(),
                    ),
                    KernelNet::Mlp(layers) => {
                        KernelNetVars::Mlp(layers.iter().map(|_| (n(), n())).collect())
                    }
                };
                let onet2d = st
                    .onet2d
                    .iter()
                    .map(|l| KanLayerVars {
                        grid: l.grid,
                        wb: n(),
                        ws: n(),
                        coef: n(),
                    })
                    .collect();
                let onet1d = st
                    .onet1d
                    .layers
                    .iter()
                    .map(|l| KanLayerVars {
                        grid: l.grid,
                        wb: n(),
                        ws: n(),
                        coef: n(),
                    })
                    .collect();
                let snet = [n(), n(), n(), n()];
                StageVars {
                    g1,
                    g2,
                    g3,
                    knet,
                    onet2d,
                    onet1d,
                    snet,
                }
            })
            .collect();
        ModelVars { stages }
    }

    /// Parameter vars in [`KanoModel::params_flat`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for st in &self.stages {
            out.push(st.g1.clone());
            out.push(st.g2.clone());
            out.push(st.g3.clone());
            match &st.knet {
                KernelNetVars::Kan(layers) => {
                    for l in layers {
                        out.extend(l.vars().into_iter().cloned());
                    }
                }
                KernelNetVars::Mlp(layers) => {
                    for (w, b) in layers {
                        out.push(w.clone());
                        out.push(b.clone());
                    }
                }
            }
            for l in st.onet2d.iter().chain(st.onet1d.iter()) {
                out.extend(l.vars().into_iter().cloned());
            }
            out.extend(st.snet.iter().cloned());
        }
        out
    }

    /// Gradients after a backward pass, aligned with [`ModelVars::flat`].
    pub fn grads(&self) -> Vec<ArrayD<f64>> {
        self.flat().iter().map(Var::grad).collect()
    }
}

fn knet_graph(vars: &KernelNetVars, k_in: &Var) -> Var {
    let k = k_in.shape()[0];
    let flat = k_in.reshape(&[1, k * k]);
    let corr = match vars {
        KernelNetVars::Kan(layers) => kan_stack_graph(&flat, layers),
        KernelNetVars::Mlp(layers) => {
            let mut cur = flat;
            for (i, (w, b)) in layers.iter().enumerate() {
                cur = cur.matmul(w).add(b);
                if i + 1 < layers.len() {
                    cur = cur.silu();
                }
            }
            cur
        }
    };
    k_in.add(&corr.reshape(&[k, k]))
}

fn onet_graph(sv: &StageVars, o_in: &Var) -> Var {
    let mid = kan_cube_graph(o_in, &sv.onet2d);
    let out = kan_cube_graph(&mid, &sv.onet1d);
    out.add(o_in)
}

fn snet_graph(sv: &StageVars, s_in: &Var) -> Result<Var> {
    let shape = s_in.shape();
    if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
        return Err(KanoError::shape(
            "snet",
            format!("spatial dims must be even, got {}x{}", shape[1], shape[2]),
        ));
    }
    let e = sv.snet[0].conv2d(s_in).silu();
    let m = sv.snet[1].conv2d(&e.avg_pool2()).silu();
    let cat = e.concat_channels(&m.up_nearest2());
    let d = sv.snet[2].conv2d(&cat).silu();
    let f = sv.snet[3].conv2d(&d);
    Ok(s_in.add(&f))
}

/// Differentiable unfolding: returns per-stage `(K, X)` variables for the
/// training loss. `y` enters as a constant leaf.
pub fn unfold_graph(
    tape: &Tape,
    y: &Cube,
    vars: &ModelVars,
    model: &KanoModel,
) -> Result<Vec<(Var, Var)>> {
    let cfg = &model.config;
    cfg.validate()?;
    if vars.stages.len() != model.stages.len() {
        return Err(KanoError::Invalid("stage count mismatch".into()));
    }
    let st0 = init_state(y, cfg.scale, cfg.kernel_size)?;
    let yv = tape.leaf(y.data.clone().into_dyn());
    let mut k = tape.leaf(st0.k.values().clone().into_dyn());
    let mut o = tape.leaf(st0.o.data.clone().into_dyn());
    let mut s = tape.leaf(st0.s.data.clone().into_dyn());
    let stride = cfg.scale;
    let ks = cfg.kernel_size;
    let mut out = Vec::with_capacity(vars.stages.len());
    for sv in &vars.stages {
        let g1 = sv.g1.softplus();
        let g2 = sv.g2.softplus();
        let g3 = sv.g3.softplus();

        let x = o.add(&s);
        let r = yv.sub(&k.blur_down(&x, stride));
        let gk = x.kernel_grad(&r, stride, ks).scale(-1.0);
        let k_in = k.sub(&gk.mul_scalar(&g1));
        let k_new = project_simplex_graph(&knet_graph(&sv.knet, &k_in));

        let x2 = o.add(&s);
        let r2 = yv.sub(&k_new.blur_down(&x2, stride));
        let go = k_new.blur_up_transpose(&r2, stride).scale(-1.0);
        let o_in = o.sub(&go.mul_scalar(&g2));
        let o_new = onet_graph(sv, &o_in);

        let x3 = o_new.add(&s);
        let r3 = yv.sub(&k_new.blur_down(&x3, stride));
        let gs = k_new.blur_up_transpose(&r3, stride).scale(-1.0);
        let s_in = s.sub(&gs.mul_scalar(&g3));
        let s_new = snet_graph(sv, &s_in)?;

        k = k_new;
        o = o_new;
        s = s_new;
        out.push((k.clone(), o.add(&s)));
    }
    Ok(out)
}
