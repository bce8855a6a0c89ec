//! Kolmogorov-Arnold layers: every edge carries a learnable SiLU + B-spline
//! function. Parameters are stored packed per layer (`wb`, `ws` as
//! `(d_in, d_out)` matrices, spline coefficients as `(d_in * n_basis, d_out)`)
//! so a whole layer evaluates as two matrix products.
//!
//! Two application modes exist for cubes: `kan1d_apply` runs a stack over
//! the per-pixel spectral vectors, `kan2d_apply` runs one channel-mixing
//! layer shared across all spatial sites.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::Cube;
use crate::error::{KanoError, Result};
use crate::spline::{basis_expand, silu, GridSpec, SplineFunction};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KanLayer {
    pub grid: GridSpec,
    /// SiLU mixing weights, `(d_in, d_out)`
    pub wb: Array2<f64>,
    /// spline mixing weights, `(d_in, d_out)`
    pub ws: Array2<f64>,
    /// spline coefficients, `(d_in * n_basis, d_out)`, row `i * nb + k`
    pub coef: Array2<f64>,
}

impl KanLayer {
    pub fn d_in(&self) -> usize {
        self.wb.dim().0
    }

    pub fn d_out(&self) -> usize {
        self.wb.dim().1
    }

    /// Random init: c ~ N(0, 0.1), w_b = w_s = 1/d_in. The 1/d_in scaling
    /// keeps layer outputs O(1) regardless of fan-in, which wide layers
    /// need for stable training; a single-input edge gets unit weights.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, grid: GridSpec, rng: &mut R) -> Self {
        let nb = grid.n_basis();
        let dist = Normal::new(0.0, 0.1).unwrap();
        let w = 1.0 / d_in as f64;
        KanLayer {
            grid,
            wb: Array2::from_elem((d_in, d_out), w),
            ws: Array2::from_elem((d_in, d_out), w),
            coef: Array2::from_shape_fn((d_in * nb, d_out), |_| dist.sample(rng)),
        }
    }

    /// Output-head init: like [`KanLayer::init`] but with mixing weights
    /// 1.4/d_in. A stack's last layer feeds a residual sum rather than
    /// another spline grid, so it tolerates a somewhat larger scale than
    /// hidden layers; going as far as 1/sqrt(d_in) makes the initial
    /// corrections large enough to destabilize joint kernel estimation,
    /// and 1/sqrt(d_in) on hidden layers diverges outright.
    pub fn init_head<R: Rng>(d_in: usize, d_out: usize, grid: GridSpec, rng: &mut R) -> Self {
        let mut layer = Self::init(d_in, d_out, grid, rng);
        let w = 1.4 / d_in as f64;
        layer.wb.fill(w);
        layer.ws.fill(w);
        layer
    }

    /// All-zero parameters: the layer maps everything to zero.
    pub fn zeros(d_in: usize, d_out: usize, grid: GridSpec) -> Self {
        let nb = grid.n_basis();
        KanLayer {
            grid,
            wb: Array2::zeros((d_in, d_out)),
            ws: Array2::zeros((d_in, d_out)),
            coef: Array2::zeros((d_in * nb, d_out)),
        }
    }

    /// The edge function between input `i` and output `j`.
    pub fn phi(&self, i: usize, j: usize) -> SplineFunction {
        let nb = self.grid.n_basis();
        let coef = Array1::from_iter((0..nb).map(|k| self.coef[[i * nb + k, j]]));
        SplineFunction::new(self.grid, coef, self.wb[[i, j]], self.ws[[i, j]])
            .expect("packed layer parameters are consistent")
    }

    pub fn param_count(&self) -> usize {
        self.wb.len() + self.ws.len() + self.coef.len()
    }

    /// Batched forward over rows of `x` with shape `(n, d_in)`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.dim().1 != self.d_in() {
            return Err(KanoError::shape(
                "kan_layer_forward",
                format!("input dim {} != layer d_in {}", x.dim().1, self.d_in()),
            ));
        }
        let nb = self.grid.n_basis();
        let silu_x = x.mapv(silu);
        let (vals, _) = basis_expand(x, &self.grid);
        // fold ws into the coefficient matrix: row i*nb+k scaled by ws[i, j]
        let mut cw = self.coef.clone();
        for i in 0..self.d_in() {
            for k in 0..nb {
                for j in 0..self.d_out() {
                    cw[[i * nb + k, j]] *= self.ws[[i, j]];
                }
            }
        }
        Ok(silu_x.dot(&self.wb) + vals.dot(&cw))
    }
}

/// Ordered layers with compatible dims.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KanStack {
    pub layers: Vec<KanLayer>,
}

impl KanStack {
    pub fn new(layers: Vec<KanLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(KanoError::Invalid("stack needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(KanoError::shape(
                    "kan_stack",
                    format!("{} -> {}", pair[0].d_out(), pair[1].d_in()),
                ));
            }
        }
        Ok(KanStack { layers })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(KanLayer::param_count).sum()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }
}

/// Single-vector layer forward (`output_j = sum_i phi_{i,j}(x_i)`).
pub fn kan_layer_forward(layer: &KanLayer, x: &Array1<f64>) -> Result<Array1<f64>> {
    let row = x.clone().insert_axis(ndarray::Axis(0));
    let out = layer.forward(&row)?;
    Ok(out.index_axis(ndarray::Axis(0), 0).to_owned())
}

/// Single-vector stack forward.
pub fn kan_forward(stack: &KanStack, x: &Array1<f64>) -> Result<Array1<f64>> {
    if x.len() != stack.d_in() {
        return Err(KanoError::shape(
            "kan_forward",
            format!("input len {} != stack d_in {}", x.len(), stack.d_in()),
        ));
    }
    let row = x.clone().insert_axis(ndarray::Axis(0));
    let out = stack.forward(&row)?;
    Ok(out.index_axis(ndarray::Axis(0), 0).to_owned())
}

fn cube_to_pixels(cube: &Cube) -> Array2<f64> {
    let (c, h, w) = cube.dim();
    let flat = cube
        .data
        .clone()
        .into_shape_with_order((c, h * w))
        .unwrap();
    flat.t().as_standard_layout().to_owned()
}

fn pixels_to_cube(px: &Array2<f64>, h: usize, w: usize) -> Cube {
    let c = px.dim().1;
    let t = px.t().as_standard_layout().to_owned();
    Cube {
        data: t.into_shape_with_order((c, h, w)).unwrap(),
    }
}

/// Run a stack over each pixel's spectral vector independently.
pub fn kan1d_apply(cube: &Cube, stack: &KanStack) -> Result<Cube> {
    let (c, h, w) = cube.dim();
    if c != stack.d_in() {
        return Err(KanoError::shape(
            "kan1d_apply",
            format!("cube channels {} != stack d_in {}", c, stack.d_in()),
        ));
    }
    let px = cube_to_pixels(cube);
    let out = stack.forward(&px)?;
    Ok(pixels_to_cube(&out, h, w))
}

/// One channel-mixing layer applied identically at every spatial site.
pub fn kan2d_apply(cube: &Cube, layer: &KanLayer) -> Result<Cube> {
    let (c, h, w) = cube.dim();
    if c != layer.d_in() {
        return Err(KanoError::shape(
            "kan2d_apply",
            format!("cube channels {} != layer d_in {}", c, layer.d_in()),
        ));
    }
    let px = cube_to_pixels(cube);
    let out = layer.forward(&px)?;
    Ok(pixels_to_cube(&out, h, w))
}

// ---- graph-building counterparts ----------------------------------------

/// Leaf handles for one layer's parameters on a tape.
pub struct KanLayerVars {
    pub grid: GridSpec,
    pub wb: Var,
    pub ws: Var,
    pub coef: Var,
}

impl KanLayerVars {
    pub fn leaves(tape: &Tape, layer: &KanLayer) -> Self {
        KanLayerVars {
            grid: layer.grid,
            wb: tape.leaf(layer.wb.clone().into_dyn()),
            ws: tape.leaf(layer.ws.clone().into_dyn()),
            coef: tape.leaf(layer.coef.clone().into_dyn()),
        }
    }

    /// In `grad_K`-collection order: wb, ws, coef.
    pub fn vars(&self) -> [&Var; 3] {
        [&self.wb, &self.ws, &self.coef]
    }
}

/// Differentiable layer forward on an `(n, d_in)` variable.
pub fn kan_layer_graph(x: &Var, vars: &KanLayerVars) -> Var {
    let nb = vars.grid.n_basis();
    let t1 = x.silu().matmul(&vars.wb);
    let cw = vars.coef.mul(&vars.ws.repeat_rows(nb));
    let t2 = x.basis_expand(&vars.grid).matmul(&cw);
    t1.add(&t2)
}

pub fn kan_stack_graph(x: &Var, layers: &[KanLayerVars]) -> Var {
    let mut cur = x.clone();
    for l in layers {
        cur = kan_layer_graph(&cur, l);
    }
    cur
}

/// Differentiable per-pixel application: `(C,H,W)` variable through a stack
/// of channel-mixing layers.
pub fn kan_cube_graph(cube: &Var, layers: &[KanLayerVars]) -> Var {
    let shape = cube.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let px = cube.reshape(&[c, h * w]).transpose2();
    let out = kan_stack_graph(&px, layers);
    let c_out = out.shape()[1];
    out.transpose2().reshape(&[c_out, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> KanLayer {
        let mut l = KanLayer::init(d_in, d_out, GridSpec::default_unit(), rng);
        l.wb.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        l.ws.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        l
    }

    #[test]
    fn one_by_one_layer_reduces_to_phi_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = random_layer(&mut rng, 1, 1);
        let phi = layer.phi(0, 0);
        for x in [-0.9, -0.2, 0.0, 0.4, 0.95] {
            let out = kan_layer_forward(&layer, &ndarray::arr1(&[x])).unwrap();
            assert_abs_diff_eq!(out[0], phi.eval(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_parameter_layer_maps_to_zero() {
        let layer = KanLayer::zeros(3, 4, GridSpec::default_unit());
        let out = kan_layer_forward(&layer, &ndarray::arr1(&[0.3, -0.7, 0.1])).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = random_layer(&mut rng, 2, 3);
        let x = ndarray::arr1(&[0.35, -0.6]);
        let out = kan_layer_forward(&layer, &x).unwrap();
        for j in 0..3 {
            let mut expect = 0.0;
            for i in 0..2 {
                expect += layer.phi(i, j).eval(x[i]);
            }
            assert_abs_diff_eq!(out[j], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let layer = KanLayer::zeros(3, 2, GridSpec::default_unit());
        assert!(kan_layer_forward(&layer, &ndarray::arr1(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn stack_composes_sequentially() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = vec![
            random_layer(&mut rng, 2, 4),
            random_layer(&mut rng, 4, 3),
            random_layer(&mut rng, 3, 2),
        ];
        let stack = KanStack::new(layers.clone()).unwrap();
        let x = ndarray::arr1(&[0.2, -0.4]);
        let got = kan_forward(&stack, &x).unwrap();
        let mut cur = x;
        for l in &layers {
            cur = kan_layer_forward(l, &cur).unwrap();
        }
        for (a, b) in got.iter().zip(cur.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_layer_stack_equals_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 3, 3);
        let stack = KanStack::new(vec![layer.clone()]).unwrap();
        let x = ndarray::arr1(&[0.1, 0.2, -0.3]);
        assert_eq!(
            kan_forward(&stack, &x).unwrap(),
            kan_layer_forward(&layer, &x).unwrap()
        );
    }

    #[test]
    fn incompatible_stack_rejected() {
        let a = KanLayer::zeros(2, 3, GridSpec::default_unit());
        let b = KanLayer::zeros(4, 2, GridSpec::default_unit());
        assert!(KanStack::new(vec![a, b]).is_err());
    }

    #[test]
    fn cube_apply_matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = KanStack::new(vec![
            random_layer(&mut rng, 3, 5),
            random_layer(&mut rng, 5, 3),
        ])
        .unwrap();
        let cube = Cube {
            data: Array::from_shape_fn((3, 4, 4), |_| rng.gen_range(-1.0..1.0)),
        };
        let out = kan1d_apply(&cube, &stack).unwrap();
        for hh in 0..4 {
            for ww in 0..4 {
                let px = Array1::from_iter((0..3).map(|c| cube.data[[c, hh, ww]]));
                let expect = kan_forward(&stack, &px).unwrap();
                for c in 0..3 {
                    assert_abs_diff_eq!(out.data[[c, hh, ww]], expect[c], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn cube_apply_single_pixel_equals_kan_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = KanStack::new(vec![random_layer(&mut rng, 4, 2)]).unwrap();
        let cube = Cube {
            data: Array::from_shape_fn((4, 1, 1), |_| rng.gen_range(-1.0..1.0)),
        };
        let out = kan1d_apply(&cube, &stack).unwrap();
        let px = Array1::from_iter((0..4).map(|c| cube.data[[c, 0, 0]]));
        let expect = kan_forward(&stack, &px).unwrap();
        for c in 0..2 {
            assert_abs_diff_eq!(out.data[[c, 0, 0]], expect[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn spatially_constant_input_gives_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = random_layer(&mut rng, 2, 3);
        let cube = Cube {
            data: Array3::from_shape_fn((2, 5, 5), |(c, _, _)| 0.1 + 0.3 * c as f64),
        };
        let out = kan2d_apply(&cube, &layer).unwrap();
        for c in 0..3 {
            let first = out.data[[c, 0, 0]];
            assert!(out
                .data
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .all(|v| (*v - first).abs() <= 1e-15));
        }
    }

    #[test]
    fn pixel_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = random_layer(&mut rng, 3, 3);
        let cube = Cube {
            data: Array::from_shape_fn((3, 2, 4), |_| rng.gen_range(-1.0..1.0)),
        };
        // permute spatial sites (flattened) then apply, vs apply then permute
        let perm: Vec<usize> = vec![5, 2, 7, 0, 3, 6, 1, 4];
        let permute = |c: &Cube| {
            let (ch, h, w) = c.dim();
            let mut out = Array3::zeros((ch, h, w));
            for cc in 0..ch {
                for (dst, src) in perm.iter().enumerate() {
                    out[[cc, dst / w, dst % w]] = c.data[[cc, src / w, src % w]];
                }
            }
            Cube { data: out }
        };
        let a = kan2d_apply(&permute(&cube), &layer).unwrap();
        let b = permute(&kan2d_apply(&cube, &layer).unwrap());
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = random_layer(&mut rng, 3, 4);
        let x = Array::from_shape_fn((6, 3), |_| rng.gen_range(-0.9..0.9));
        let plain = layer.forward(&x).unwrap();

        let tape = Tape::new(0);
        let xv = tape.leaf(x.into_dyn());
        let vars = KanLayerVars::leaves(&tape, &layer);
        let out = kan_layer_graph(&xv, &vars);
        let got = out.value();
        for (a, b) in got.iter().zip(plain.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
