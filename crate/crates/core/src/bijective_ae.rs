//! Lossless spatial compression by stacked stride-2 space-to-depth stages.
//!
//! Each stage rearranges every `2^d` block into channels and then mixes the
//! channels of each cell with a square invertible matrix. Decoding applies the
//! cached inverses in reverse, so `decode(encode(x)) == x` up to rounding, and
//! exactly when every mixing matrix is the identity.
//!
//! Channel order inside a block is row-major over the block offset with the
//! source channel fastest: offset `o`, channel `c` lands in `o * C + c`.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{ravel, unravel, Field};
use crate::rng::{self, tag};

pub const DEFAULT_CONDITION_BOUND: f64 = 1e6;
const INVERSE_RESIDUAL_TOL: f64 = 1e-6;

pub fn space_to_depth(field: &Field, stride: usize) -> Result<Field> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    if let Some(&bad) = field.dims().iter().find(|&&n| n % stride != 0) {
        return Err(Error::shape(format!("dim {bad} not divisible by stride {stride}")));
    }
    let d = field.ndim();
    let c = field.channels();
    let block = stride.pow(d as u32);
    let out_dims: Vec<usize> = field.dims().iter().map(|n| n / stride).collect();
    let mut out = vec![0.0; field.len()];
    let bdims = vec![stride; d];
    let mut ycoord = vec![0; d];
    let mut boff = vec![0; d];
    let mut xcoord = vec![0; d];
    let src = field.data();
    let out_cells: usize = out_dims.iter().product();
    for y in 0..out_cells {
        unravel(y, &out_dims, &mut ycoord);
        for o in 0..block {
            unravel(o, &bdims, &mut boff);
            for k in 0..d {
                xcoord[k] = ycoord[k] * stride + boff[k];
            }
            let x = ravel(&xcoord, field.dims());
            let dst = (y * block + o) * c;
            out[dst..dst + c].copy_from_slice(&src[x * c..(x + 1) * c]);
        }
    }
    Field::from_vec(&out_dims, c * block, out)
}

pub fn depth_to_space(field: &Field, stride: usize) -> Result<Field> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let d = field.ndim();
    let block = stride.pow(d as u32);
    if field.channels() % block != 0 {
        return Err(Error::shape(format!(
            "{} channels cannot unfold into {}^{} blocks",
            field.channels(),
            stride,
            d
        )));
    }
    let c = field.channels() / block;
    let out_dims: Vec<usize> = field.dims().iter().map(|n| n * stride).collect();
    let mut out = vec![0.0; field.len()];
    let bdims = vec![stride; d];
    let mut ycoord = vec![0; d];
    let mut boff = vec![0; d];
    let mut xcoord = vec![0; d];
    let src = field.data();
    for y in 0..field.cell_count() {
        unravel(y, field.dims(), &mut ycoord);
        for o in 0..block {
            unravel(o, &bdims, &mut boff);
            for k in 0..d {
                xcoord[k] = ycoord[k] * stride + boff[k];
            }
            let x = ravel(&xcoord, &out_dims);
            let from = (y * block + o) * c;
            out[x * c..(x + 1) * c].copy_from_slice(&src[from..from + c]);
        }
    }
    Field::from_vec(&out_dims, c, out)
}

/// `out_cell = matrix * in_cell` for every cell.
fn mix(matrix: &DMatrix<f64>, field: &Field) -> Field {
    let side = field.channels();
    let x = DMatrix::from_column_slice(side, field.cell_count(), field.data());
    let y = matrix * x;
    Field::from_vec(field.dims(), side, y.as_slice().to_vec()).expect("shape preserved")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingStage {
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl MixingStage {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn side(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Mixing matrices for `log2(n)` stride-2 stages plus their cached inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct AeParams {
    ndim: usize,
    in_channels: usize,
    stages: Vec<MixingStage>,
    condition_bound: f64,
}

fn stage_side(ndim: usize, in_channels: usize, stage: usize) -> usize {
    in_channels << (ndim * (stage + 1))
}

fn random_orthogonal(side: usize, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(side, side, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // sign-fix so the draw is Haar distributed
    for j in 0..side {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl AeParams {
    pub fn identity(ndim: usize, in_channels: usize, num_stages: usize) -> Self {
        let stages = (0..num_stages)
            .map(|s| {
                let side = stage_side(ndim, in_channels, s);
                MixingStage {
                    matrix: DMatrix::identity(side, side),
                    inverse: DMatrix::identity(side, side),
                }
            })
            .collect();
        AeParams {
            ndim,
            in_channels,
            stages,
            condition_bound: DEFAULT_CONDITION_BOUND,
        }
    }

    pub fn random_orthogonal(ndim: usize, in_channels: usize, num_stages: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, &[tag::AE_INIT]);
        let matrices = (0..num_stages)
            .map(|s| random_orthogonal(stage_side(ndim, in_channels, s), &mut rng))
            .collect();
        Self::from_matrices(ndim, in_channels, matrices).expect("orthogonal matrices are invertible")
    }

    /// Validates shapes and conditioning and computes the inverses.
    pub fn from_matrices(ndim: usize, in_channels: usize, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        for (s, m) in matrices.iter().enumerate() {
            let side = stage_side(ndim, in_channels, s);
            if m.nrows() != side || m.ncols() != side {
                return Err(Error::shape(format!(
                    "stage {s} matrix is {}x{}, expected {side}x{side}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let mut p = AeParams {
            ndim,
            in_channels,
            stages: matrices
                .into_iter()
                .map(|m| MixingStage {
                    inverse: m.clone(),
                    matrix: m,
                })
                .collect(),
            condition_bound: DEFAULT_CONDITION_BOUND,
        };
        p.refresh_inverses()?;
        Ok(p)
    }

    pub fn with_condition_bound(mut self, bound: f64) -> Result<Self> {
        self.condition_bound = bound;
        self.refresh_inverses()?;
        Ok(self)
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[MixingStage] {
        &self.stages
    }

    pub fn condition_bound(&self) -> f64 {
        self.condition_bound
    }

    /// Per-axis compression `n = 2^stages`.
    pub fn ratio(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn latent_channels(&self) -> usize {
        self.in_channels * self.ratio().pow(self.ndim as u32)
    }

    pub fn latent_dims(&self, dims: &[usize]) -> Vec<usize> {
        dims.iter().map(|n| n / self.ratio()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|s| s.matrix.len()).sum()
    }

    /// Recomputes every cached inverse, rejecting ill-conditioned stages.
    pub fn refresh_inverses(&mut self) -> Result<()> {
        for (s, stage) in self.stages.iter_mut().enumerate() {
            if stage.matrix.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular {
                    stage: s,
                    reason: "non-finite entries".into(),
                });
            }
            let sv = stage.matrix.singular_values();
            let smax = sv.max();
            let smin = sv.min();
            let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            if !(cond <= self.condition_bound) {
                return Err(Error::Singular {
                    stage: s,
                    reason: format!("condition number {cond:.3e} exceeds {:.3e}", self.condition_bound),
                });
            }
            let inv = stage.matrix.clone().try_inverse().ok_or_else(|| Error::Singular {
                stage: s,
                reason: "LU factorization failed".into(),
            })?;
            let side = stage.matrix.nrows();
            let resid = (&stage.matrix * &inv - DMatrix::<f64>::identity(side, side)).amax();
            if resid > INVERSE_RESIDUAL_TOL {
                return Err(Error::Singular {
                    stage: s,
                    reason: format!("inverse residual {resid:.3e}"),
                });
            }
            stage.inverse = inv;
        }
        Ok(())
    }

    /// Flat view of all mixing entries, stage by stage, column-major.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for s in &self.stages {
            out.extend_from_slice(s.matrix.as_slice());
        }
    }

    /// Overwrites the mixing entries from a flat slice; inverses are NOT
    /// refreshed. Returns the number of values consumed.
    pub fn load_flat(&mut self, values: &[f64]) -> usize {
        let mut at = 0;
        for s in &mut self.stages {
            let n = s.matrix.len();
            s.matrix.as_mut_slice().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        at
    }

    fn check_input(&self, field: &Field) -> Result<()> {
        if field.ndim() != self.ndim || field.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "autoencoder expects {}D fields with {} channels, got {}D with {}",
                self.ndim,
                self.in_channels,
                field.ndim(),
                field.channels()
            )));
        }
        if let Some(&bad) = field.dims().iter().find(|&&n| n % self.ratio() != 0) {
            return Err(Error::shape(format!(
                "dim {bad} not divisible by compression ratio {}",
                self.ratio()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, latent: &Field) -> Result<()> {
        if latent.ndim() != self.ndim || latent.channels() != self.latent_channels() {
            return Err(Error::shape(format!(
                "latent must be {}D with {} channels, got {}D with {}",
                self.ndim,
                self.latent_channels(),
                latent.ndim(),
                latent.channels()
            )));
        }
        Ok(())
    }
}

pub fn encode(field: &Field, params: &AeParams) -> Result<Field> {
    params.check_input(field)?;
    let mut cur = field.clone();
    for stage in &params.stages {
        cur = mix(&stage.matrix, &space_to_depth(&cur, 2)?);
    }
    Ok(cur)
}

pub fn decode(latent: &Field, params: &AeParams) -> Result<Field> {
    params.check_latent(latent)?;
    let mut cur = latent.clone();
    for stage in params.stages.iter().rev() {
        cur = depth_to_space(&mix(&stage.inverse, &cur), 2)?;
    }
    Ok(cur)
}

pub fn refresh_inverses(mut params: AeParams) -> Result<AeParams> {
    params.refresh_inverses()?;
    Ok(params)
}

/// Gradients with respect to each stage's mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AeGrads {
    pub stages: Vec<DMatrix<f64>>,
}

impl AeGrads {
    pub fn zeros(params: &AeParams) -> Self {
        AeGrads {
            stages: params
                .stages
                .iter()
                .map(|s| DMatrix::zeros(s.side(), s.side()))
                .collect(),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for g in &self.stages {
            out.extend_from_slice(g.as_slice());
        }
    }
}

/// Encoder activations needed for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    /// Input to each mixing matrix (after the shuffle).
    mixed_inputs: Vec<Field>,
}

pub fn encode_traced(field: &Field, params: &AeParams) -> Result<(Field, EncodeTrace)> {
    params.check_input(field)?;
    let mut cur = field.clone();
    let mut mixed_inputs = Vec::with_capacity(params.stages.len());
    for stage in &params.stages {
        let shuffled = space_to_depth(&cur, 2)?;
        cur = mix(&stage.matrix, &shuffled);
        mixed_inputs.push(shuffled);
    }
    Ok((cur, EncodeTrace { mixed_inputs }))
}

/// Accumulates mixing gradients into `grads`; returns d loss / d input.
pub fn encode_backward(grad_latent: &Field, trace: &EncodeTrace, params: &AeParams, grads: &mut AeGrads) -> Result<Field> {
    let mut g = grad_latent.clone();
    for (s, stage) in params.stages.iter().enumerate().rev() {
        let x = &trace.mixed_inputs[s];
        let side = stage.side();
        let gm = DMatrix::from_column_slice(side, g.cell_count(), g.data());
        let xm = DMatrix::from_column_slice(side, x.cell_count(), x.data());
        grads.stages[s] += &gm * xm.transpose();
        let gx = stage.matrix.tr_mul(&gm);
        let gx = Field::from_vec(g.dims(), side, gx.as_slice().to_vec())?;
        g = depth_to_space(&gx, 2)?;
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    /// Input to each inverse matrix, indexed by stage.
    inverse_inputs: Vec<Field>,
}

pub fn decode_traced(latent: &Field, params: &AeParams) -> Result<(Field, DecodeTrace)> {
    params.check_latent(latent)?;
    let mut cur = latent.clone();
    let mut inverse_inputs = vec![Field::zeros(&[1], 1); params.stages.len()];
    for (s, stage) in params.stages.iter().enumerate().rev() {
        let mixed = mix(&stage.inverse, &cur);
        inverse_inputs[s] = std::mem::replace(&mut cur, depth_to_space(&mixed, 2)?);
    }
    Ok((cur, DecodeTrace { inverse_inputs }))
}

/// Accumulates mixing gradients (through the inverse) into `grads`; returns
/// d loss / d latent.
pub fn decode_backward(grad_out: &Field, trace: &DecodeTrace, params: &AeParams, grads: &mut AeGrads) -> Result<Field> {
    let mut g = grad_out.clone();
    for (s, stage) in params.stages.iter().enumerate() {
        let gs = space_to_depth(&g, 2)?;
        let y = &trace.inverse_inputs[s];
        let side = stage.side();
        let gm = DMatrix::from_column_slice(side, gs.cell_count(), gs.data());
        let ym = DMatrix::from_column_slice(side, y.cell_count(), y.data());
        let d_inv = &gm * ym.transpose();
        // d(M^-1) = -M^-1 dM M^-1
        let inv_t = stage.inverse.transpose();
        grads.stages[s] -= &inv_t * d_inv * &inv_t;
        let gy = stage.inverse.tr_mul(&gm);
        g = Field::from_vec(gs.dims(), side, gy.as_slice().to_vec())?;
    }
    Ok(g)
}
