//! Bilinearly-coupled substrate energy.
//!
//! The state `x ∈ R^D` is split two ways: into contiguous input, hidden and
//! output blocks (in that order), and into `L` physical modules. The energy is
//!
//! ```text
//! E(x) = Σ_i (½ a_i x_i² + ¼ κ_i x_i⁴ − b0_i x_i) + Σ_{m<m'} ⟨x^(m), U_mm' V_mm'ᵀ x^(m')⟩
//! ```
//!
//! Couplings are always applied through their factors; the dense `U Vᵀ` is
//! only formed when assembling the free Hessian.
//!
//! The trainable parameter vector θ is flattened in a fixed order: couplings
//! sorted by `(m, m')`, and for each coupling the `U` factor (column-major)
//! followed by the `V` factor (column-major); then the trainable biases of the
//! free (hidden and output) coordinates by index.

use std::ops::{Deref, Range};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use crate::rng::normal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ThermoError};

/// Default lower bound on the free-Hessian spectrum.
pub const DEFAULT_LAMBDA_FLOOR: f64 = 0.1;

/// Input / hidden / output blocks and the module decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockPartition {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub module_sizes: Vec<usize>,
    /// When set, the last input coordinate carries `ln σ` instead of data.
    #[serde(default = "default_true")]
    pub sigma_channel: bool,
}

fn default_true() -> bool {
    true
}

impl BlockPartition {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        module_sizes: Vec<usize>,
        sigma_channel: bool,
    ) -> Result<Self> {
        let p = BlockPartition {
            input_dim,
            hidden_dim,
            output_dim,
            module_sizes,
            sigma_channel,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim + self.hidden_dim + self.output_dim;
        let total: usize = self.module_sizes.iter().sum();
        if d != total {
            return Err(ThermoError::InvalidConfig(format!(
                "block sizes sum to {d} but module sizes sum to {total}"
            )));
        }
        if self.module_sizes.len() < 2 {
            return Err(ThermoError::InvalidConfig(
                "at least two modules are required".into(),
            ));
        }
        if self.module_sizes.contains(&0) {
            return Err(ThermoError::InvalidConfig("empty module".into()));
        }
        if self.output_dim == 0 {
            return Err(ThermoError::InvalidConfig("output block is empty".into()));
        }
        if self.sigma_channel && self.input_dim == 0 {
            return Err(ThermoError::InvalidConfig(
                "sigma channel needs at least one input coordinate".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.input_dim + self.hidden_dim + self.output_dim
    }

    pub fn num_modules(&self) -> usize {
        self.module_sizes.len()
    }

    pub fn module_range(&self, m: usize) -> Range<usize> {
        let start: usize = self.module_sizes[..m].iter().sum();
        start..start + self.module_sizes[m]
    }

    pub fn input_range(&self) -> Range<usize> {
        0..self.input_dim
    }

    pub fn hidden_range(&self) -> Range<usize> {
        self.input_dim..self.input_dim + self.hidden_dim
    }

    pub fn output_range(&self) -> Range<usize> {
        let s = self.input_dim + self.hidden_dim;
        s..s + self.output_dim
    }

    /// Hidden and output coordinates, i.e. everything that relaxes.
    pub fn free_range(&self) -> Range<usize> {
        self.input_dim..self.dim()
    }

    pub fn free_dim(&self) -> usize {
        self.hidden_dim + self.output_dim
    }

    /// Number of input coordinates that carry data (excludes the σ channel).
    pub fn data_dim(&self) -> usize {
        self.input_dim - usize::from(self.sigma_channel)
    }

    pub fn module_of(&self, i: usize) -> usize {
        let mut acc = 0;
        for (m, &s) in self.module_sizes.iter().enumerate() {
            acc += s;
            if i < acc {
                return m;
            }
        }
        panic!("index {i} outside partition of dimension {}", self.dim());
    }
}

/// Rank-k coupling between modules `source < target`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankCoupling {
    pub source: usize,
    pub target: usize,
    /// `d_source × k`
    pub u: DMatrix<f64>,
    /// `d_target × k`
    pub v: DMatrix<f64>,
}

impl LowRankCoupling {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// Dense `U Vᵀ`. Only used for Hessians and tests.
    pub fn dense(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    /// Gaussian factors with entries scaled by `gain / sqrt(k · rows)`.
    pub fn seeded(
        source: usize,
        target: usize,
        d_source: usize,
        d_target: usize,
        k: usize,
        seed: u64,
        gain: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let su = gain / ((k * d_source) as f64).sqrt();
        let sv = gain / ((k * d_target) as f64).sqrt();
        let u = DMatrix::from_fn(d_source, k, |_, _| {
            su * normal(&mut rng)
        });
        let v = DMatrix::from_fn(d_target, k, |_, _| {
            sv * normal(&mut rng)
        });
        LowRankCoupling {
            source,
            target,
            u,
            v,
        }
    }
}

/// Per-coordinate convex base energy `½ a x² + ¼ κ x⁴ − b0 x`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseEnergy {
    pub stiffness: DVector<f64>,
    pub bias: DVector<f64>,
    pub quartic: DVector<f64>,
}

impl BaseEnergy {
    pub fn quadratic(d: usize, a: f64) -> Self {
        BaseEnergy {
            stiffness: DVector::from_element(d, a),
            bias: DVector::zeros(d),
            quartic: DVector::zeros(d),
        }
    }
}

/// Which parameter groups make up θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainableMask {
    pub u: bool,
    pub v: bool,
    pub bias: bool,
}

impl Default for TrainableMask {
    fn default() -> Self {
        TrainableMask {
            u: true,
            v: true,
            bias: true,
        }
    }
}

/// Kind of a contiguous θ segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    U { coupling: usize },
    V { coupling: usize },
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaSegment {
    pub kind: SegmentKind,
    pub range: Range<usize>,
}

/// Layout of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaLayout {
    pub segments: Vec<ThetaSegment>,
    /// Number of leading entries that belong to coupling factors.
    pub coupling_len: usize,
    pub len: usize,
}

/// Outcome of the spectral check performed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessReport {
    pub lambda_min: f64,
    pub lambda_floor: f64,
    /// Global factor applied to every `W = U Vᵀ` (1 when untouched).
    pub coupling_rescale: f64,
    pub lambda_min_before_rescale: f64,
}

/// Immutable substrate description; θ lives in the coupling factors and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstrateSpec {
    partition: BlockPartition,
    base: BaseEnergy,
    couplings: Vec<LowRankCoupling>,
    trainable: TrainableMask,
    lambda_floor: f64,
    stiffness: StiffnessReport,
    layout: ThetaLayout,
}

/// Physical state; entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ThermoError::NonFinite("state vector"));
        }
        Ok(StateVector(values))
    }

    pub fn zeros(d: usize) -> Self {
        StateVector(DVector::zeros(d))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl SubstrateSpec {
    /// Builds a spec and rejects it if the free Hessian at the clamped origin
    /// has its smallest eigenvalue below `lambda_floor`.
    pub fn new(
        partition: BlockPartition,
        base: BaseEnergy,
        couplings: Vec<LowRankCoupling>,
        trainable: TrainableMask,
        lambda_floor: f64,
    ) -> Result<Self> {
        let mut spec = Self::assemble(partition, base, couplings, trainable, lambda_floor)?;
        let lambda_min = spec.origin_lambda_min();
        if lambda_min < lambda_floor {
            return Err(ThermoError::StiffnessViolation {
                lambda_min,
                lambda_floor,
            });
        }
        spec.stiffness = StiffnessReport {
            lambda_min,
            lambda_floor,
            coupling_rescale: 1.0,
            lambda_min_before_rescale: lambda_min,
        };
        Ok(spec)
    }

    /// Like [`SubstrateSpec::new`], but shrinks all couplings by one global
    /// factor when needed. The factor is reported in [`SubstrateSpec::stiffness`].
    pub fn new_rescaled(
        partition: BlockPartition,
        base: BaseEnergy,
        couplings: Vec<LowRankCoupling>,
        trainable: TrainableMask,
        lambda_floor: f64,
    ) -> Result<Self> {
        let mut spec = Self::assemble(partition, base, couplings, trainable, lambda_floor)?;
        let before = spec.origin_lambda_min();
        if before >= lambda_floor {
            spec.stiffness = StiffnessReport {
                lambda_min: before,
                lambda_floor,
                coupling_rescale: 1.0,
                lambda_min_before_rescale: before,
            };
            return Ok(spec);
        }
        let free = spec.partition.free_range();
        let base_min = free
            .clone()
            .map(|i| spec.base.stiffness[i])
            .fold(f64::INFINITY, f64::min);
        if base_min < lambda_floor {
            return Err(ThermoError::StiffnessViolation {
                lambda_min: before,
                lambda_floor,
            });
        }
        // λ_min(D + sC) is concave in s, so the feasible set is an interval [0, s*].
        let original = spec.couplings.clone();
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            spec.couplings = scaled_couplings(&original, mid);
            if spec.origin_lambda_min() >= lambda_floor {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        spec.couplings = scaled_couplings(&original, lo);
        let after = spec.origin_lambda_min();
        spec.stiffness = StiffnessReport {
            lambda_min: after,
            lambda_floor,
            coupling_rescale: lo,
            lambda_min_before_rescale: before,
        };
        Ok(spec)
    }

    fn assemble(
        partition: BlockPartition,
        base: BaseEnergy,
        mut couplings: Vec<LowRankCoupling>,
        trainable: TrainableMask,
        lambda_floor: f64,
    ) -> Result<Self> {
        partition.validate()?;
        let d = partition.dim();
        for (name, v) in [
            ("stiffness", &base.stiffness),
            ("bias", &base.bias),
            ("quartic", &base.quartic),
        ] {
            if v.len() != d {
                return Err(ThermoError::InvalidConfig(format!(
                    "base {name} has length {} but D = {d}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ThermoError::InvalidConfig(format!("base {name} not finite")));
            }
        }
        if base.stiffness.iter().any(|&a| a <= 0.0) {
            return Err(ThermoError::InvalidConfig("stiffness must be positive".into()));
        }
        if base.quartic.iter().any(|&k| k < 0.0) {
            return Err(ThermoError::InvalidConfig(
                "quartic coefficients must be nonnegative".into(),
            ));
        }
        if !(lambda_floor > 0.0) {
            return Err(ThermoError::InvalidConfig("lambda_floor must be positive".into()));
        }
        couplings.sort_by_key(|c| (c.source, c.target));
        for w in couplings.windows(2) {
            if (w[0].source, w[0].target) == (w[1].source, w[1].target) {
                return Err(ThermoError::InvalidConfig(format!(
                    "duplicate coupling ({}, {})",
                    w[0].source, w[0].target
                )));
            }
        }
        let l = partition.num_modules();
        for c in &couplings {
            if c.source >= c.target || c.target >= l {
                return Err(ThermoError::InvalidConfig(format!(
                    "coupling ({}, {}) must satisfy m < m' < {l}",
                    c.source, c.target
                )));
            }
            let (dm, dmp) = (
                partition.module_sizes[c.source],
                partition.module_sizes[c.target],
            );
            let k = c.u.ncols();
            if c.u.nrows() != dm || c.v.nrows() != dmp || c.v.ncols() != k {
                return Err(ThermoError::InvalidConfig(format!(
                    "coupling ({}, {}) factor shapes {:?}/{:?} do not match modules ({dm}, {dmp})",
                    c.source,
                    c.target,
                    c.u.shape(),
                    c.v.shape()
                )));
            }
            if k == 0 || k > dm.min(dmp) {
                return Err(ThermoError::InvalidConfig(format!(
                    "coupling rank {k} must lie in 1..=min({dm}, {dmp})"
                )));
            }
        }
        let layout = build_layout(&partition, &couplings, trainable);
        Ok(SubstrateSpec {
            partition,
            base,
            couplings,
            trainable,
            lambda_floor,
            stiffness: StiffnessReport {
                lambda_min: f64::NAN,
                lambda_floor,
                coupling_rescale: 1.0,
                lambda_min_before_rescale: f64::NAN,
            },
            layout,
        })
    }

    fn origin_lambda_min(&self) -> f64 {
        let h = self.hessian_free_raw(&DVector::zeros(self.dim()));
        smallest_eigenvalue(&h)
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn base(&self) -> &BaseEnergy {
        &self.base
    }

    pub fn couplings(&self) -> &[LowRankCoupling] {
        &self.couplings
    }

    pub fn trainable(&self) -> TrainableMask {
        self.trainable
    }

    pub fn lambda_floor(&self) -> f64 {
        self.lambda_floor
    }

    pub fn stiffness(&self) -> StiffnessReport {
        self.stiffness
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.partition.dim()
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(ThermoError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Current θ in canonical order.
    pub fn theta(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.len);
        for seg in &self.layout.segments {
            let dst = &mut out.as_mut_slice()[seg.range.clone()];
            match seg.kind {
                SegmentKind::U { coupling } => {
                    dst.copy_from_slice(self.couplings[coupling].u.as_slice())
                }
                SegmentKind::V { coupling } => {
                    dst.copy_from_slice(self.couplings[coupling].v.as_slice())
                }
                SegmentKind::Bias => dst.copy_from_slice(
                    &self.base.bias.as_slice()[self.partition.free_range()],
                ),
            }
        }
        out
    }

    /// Copy of the spec with θ replaced. The stiffness check is not repeated,
    /// so training can move θ away from the constructed spectrum.
    pub fn with_theta(&self, theta: &DVector<f64>) -> Result<Self> {
        if theta.len() != self.layout.len {
            return Err(ThermoError::DimensionMismatch {
                expected: self.layout.len,
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(ThermoError::NonFinite("theta"));
        }
        let mut out = self.clone();
        for seg in &self.layout.segments {
            let src = &theta.as_slice()[seg.range.clone()];
            match seg.kind {
                SegmentKind::U { coupling } => {
                    out.couplings[coupling].u.as_mut_slice().copy_from_slice(src)
                }
                SegmentKind::V { coupling } => {
                    out.couplings[coupling].v.as_mut_slice().copy_from_slice(src)
                }
                SegmentKind::Bias => {
                    let free = self.partition.free_range();
                    out.base.bias.as_mut_slice()[free].copy_from_slice(src)
                }
            }
        }
        Ok(out)
    }

    /// Energy through the factors, `O(Dk)` per coupling.
    pub fn energy(&self, x: &StateVector) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.energy_raw(x))
    }

    pub(crate) fn energy_raw(&self, x: &DVector<f64>) -> f64 {
        let b = &self.base;
        let mut e = 0.0;
        for i in 0..x.len() {
            let xi = x[i];
            let x2 = xi * xi;
            e += 0.5 * b.stiffness[i] * x2 + 0.25 * b.quartic[i] * x2 * x2 - b.bias[i] * xi;
        }
        for c in &self.couplings {
            let xm = x.rows_range(self.partition.module_range(c.source));
            let xmp = x.rows_range(self.partition.module_range(c.target));
            let q = c.u.tr_mul(&xm);
            let p = c.v.tr_mul(&xmp);
            e += q.dot(&p);
        }
        e
    }

    /// `∇_x E` over all D coordinates.
    pub fn grad_x(&self, x: &StateVector) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let mut g = DVector::zeros(x.len());
        self.grad_x_into(x, &mut g);
        Ok(g)
    }

    pub(crate) fn grad_x_into(&self, x: &DVector<f64>, g: &mut DVector<f64>) {
        let b = &self.base;
        for i in 0..x.len() {
            let xi = x[i];
            g[i] = b.stiffness[i] * xi + b.quartic[i] * xi * xi * xi - b.bias[i];
        }
        for c in &self.couplings {
            let rm = self.partition.module_range(c.source);
            let rmp = self.partition.module_range(c.target);
            let q = c.u.tr_mul(&x.rows(rm.start, rm.len()));
            let p = c.v.tr_mul(&x.rows(rmp.start, rmp.len()));
            g.rows_mut(rm.start, rm.len()).gemv(1.0, &c.u, &p, 1.0);
            g.rows_mut(rmp.start, rmp.len()).gemv(1.0, &c.v, &q, 1.0);
        }
    }

    /// `∇_θ E` in canonical order.
    pub fn grad_theta(&self, x: &StateVector) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok(self.grad_theta_raw(x))
    }

    pub(crate) fn grad_theta_raw(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.len);
        for seg in &self.layout.segments {
            let dst = &mut out.as_mut_slice()[seg.range.clone()];
            match seg.kind {
                SegmentKind::U { coupling } => {
                    let c = &self.couplings[coupling];
                    let xm = x.rows_range(self.partition.module_range(c.source));
                    let xmp = x.rows_range(self.partition.module_range(c.target));
                    let p = c.v.tr_mul(&xmp);
                    let gu = xm * p.transpose();
                    dst.copy_from_slice(gu.as_slice());
                }
                SegmentKind::V { coupling } => {
                    let c = &self.couplings[coupling];
                    let xm = x.rows_range(self.partition.module_range(c.source));
                    let xmp = x.rows_range(self.partition.module_range(c.target));
                    let q = c.u.tr_mul(&xm);
                    let gv = xmp * q.transpose();
                    dst.copy_from_slice(gv.as_slice());
                }
                SegmentKind::Bias => {
                    for (d, &xi) in dst.iter_mut().zip(&x.as_slice()[self.partition.free_range()]) {
                        *d = -xi;
                    }
                }
            }
        }
        out
    }

    /// Dense Hessian over the free (hidden and output) coordinates.
    pub fn hessian_free(&self, x: &StateVector) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        Ok(self.hessian_free_raw(x))
    }

    pub(crate) fn hessian_free_raw(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let off = self.partition.input_dim;
        let nf = self.partition.free_dim();
        let b = &self.base;
        let mut h = DMatrix::zeros(nf, nf);
        for f in 0..nf {
            let i = f + off;
            h[(f, f)] = b.stiffness[i] + 3.0 * b.quartic[i] * x[i] * x[i];
        }
        for c in &self.couplings {
            let w = c.dense();
            let rm = self.partition.module_range(c.source);
            let rmp = self.partition.module_range(c.target);
            for (r, i) in rm.clone().enumerate() {
                if i < off {
                    continue;
                }
                for (s, j) in rmp.clone().enumerate() {
                    if j < off {
                        continue;
                    }
                    h[(i - off, j - off)] += w[(r, s)];
                    h[(j - off, i - off)] += w[(r, s)];
                }
            }
        }
        h
    }

    /// Free-Hessian / vector product without forming the Hessian.
    pub(crate) fn hessian_vec_free(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        // Embed v in a full-length vector with zeros on the input block.
        let off = self.partition.input_dim;
        let d = self.dim();
        let mut full = DVector::zeros(d);
        full.rows_mut(off, d - off).copy_from(v);
        let b = &self.base;
        let mut out = DVector::zeros(d);
        for i in off..d {
            out[i] = (b.stiffness[i] + 3.0 * b.quartic[i] * x[i] * x[i]) * full[i];
        }
        for c in &self.couplings {
            let rm = self.partition.module_range(c.source);
            let rmp = self.partition.module_range(c.target);
            let q = c.u.tr_mul(&full.rows(rm.start, rm.len()));
            let p = c.v.tr_mul(&full.rows(rmp.start, rmp.len()));
            out.rows_mut(rm.start, rm.len()).gemv(1.0, &c.u, &p, 1.0);
            out.rows_mut(rmp.start, rmp.len()).gemv(1.0, &c.v, &q, 1.0);
        }
        out.rows(off, d - off).into_owned()
    }

    /// Mixed second derivative `∂²E / ∂θ ∂x_free`, shape `|θ| × free_dim`.
    pub fn mixed_second(&self, x: &StateVector) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        Ok(self.mixed_second_raw(x))
    }

    pub(crate) fn mixed_second_raw(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let off = self.partition.input_dim;
        let nf = self.partition.free_dim();
        let mut m = DMatrix::zeros(self.layout.len, nf);
        for seg in &self.layout.segments {
            let start = seg.range.start;
            match seg.kind {
                SegmentKind::U { coupling } | SegmentKind::V { coupling } => {
                    let c = &self.couplings[coupling];
                    // Own factor F, partner factor G: ∂E/∂F_rj = x_own[r] (G_j · x_partner).
                    let (own, partner, f, g) = match seg.kind {
                        SegmentKind::U { .. } => (c.source, c.target, &c.u, &c.v),
                        _ => (c.target, c.source, &c.v, &c.u),
                    };
                    let r_own = self.partition.module_range(own);
                    let r_par = self.partition.module_range(partner);
                    let proj = g.tr_mul(&x.rows(r_par.start, r_par.len()));
                    let rows = f.nrows();
                    for j in 0..f.ncols() {
                        for r in 0..rows {
                            let row = start + r + j * rows;
                            let i = r_own.start + r;
                            if i >= off {
                                m[(row, i - off)] += proj[j];
                            }
                            let xi = x[i];
                            for (l, gl) in r_par.clone().enumerate() {
                                if gl >= off {
                                    m[(row, gl - off)] += xi * g[(l, j)];
                                }
                            }
                        }
                    }
                }
                SegmentKind::Bias => {
                    for f in 0..seg.range.len() {
                        m[(start + f, f)] = -1.0;
                    }
                }
            }
        }
        m
    }

    /// Max-norm of the third mixed derivative `∂³E / ∂θ ∂x_free ∂x_free`
    /// restricted to coupling-factor rows, by central differences of
    /// [`SubstrateSpec::mixed_second`] with step `h`.
    pub fn mixed_third_coupling_norm(&self, x: &StateVector, h: f64) -> Result<f64> {
        let n = self.mixed_third_fd(x, h)?;
        let rows = self.layout.coupling_len;
        Ok(n.iter()
            .map(|slab| {
                slab.rows(0, rows)
                    .iter()
                    .fold(0.0_f64, |acc, v| acc.max(v.abs()))
            })
            .fold(0.0, f64::max))
    }

    /// Central-difference slabs `∂M/∂x_l` for every free coordinate `l`.
    pub fn mixed_third_fd(&self, x: &StateVector, h: f64) -> Result<Vec<DMatrix<f64>>> {
        self.check_dim(x)?;
        if !(h > 0.0) {
            return Err(ThermoError::InvalidArgument("fd step must be positive".into()));
        }
        let off = self.partition.input_dim;
        let mut xp: DVector<f64> = (**x).clone();
        Ok(self
            .partition
            .free_range()
            .map(|i| {
                let x0 = xp[i];
                xp[i] = x0 + h;
                let plus = self.mixed_second_raw(&xp);
                xp[i] = x0 - h;
                let minus = self.mixed_second_raw(&xp);
                xp[i] = x0;
                debug_assert!(i >= off);
                (plus - minus) / (2.0 * h)
            })
            .collect())
    }

    /// Diagonal of `∇³_x E` (`∂³E/∂x_i³` on free coordinates), by central
    /// differences of the free-Hessian diagonal. Analytically `6 κ_i x_i`.
    pub fn third_x_diagonal(&self, x: &StateVector, h: f64) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let off = self.partition.input_dim;
        let mut xp: DVector<f64> = (**x).clone();
        let nf = self.partition.free_dim();
        let mut out = DVector::zeros(nf);
        for f in 0..nf {
            let i = f + off;
            let x0 = xp[i];
            xp[i] = x0 + h;
            let plus = self.hessian_free_raw(&xp)[(f, f)];
            xp[i] = x0 - h;
            let minus = self.hessian_free_raw(&xp)[(f, f)];
            xp[i] = x0;
            out[f] = (plus - minus) / (2.0 * h);
        }
        Ok(out)
    }

    /// Largest free-Hessian eigenvalue by power iteration.
    pub fn lambda_max_estimate(&self, x: &DVector<f64>) -> f64 {
        let nf = self.partition.free_dim();
        let mut v = DVector::from_fn(nf, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
        v /= v.norm();
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w = self.hessian_vec_free(x, &v);
            let next = v.dot(&w);
            let n = w.norm();
            if n == 0.0 {
                return 0.0;
            }
            v = w / n;
            if (next - lambda).abs() <= 1e-10 * next.abs() {
                lambda = next;
                break;
            }
            lambda = next;
        }
        // Power iteration converges from below; pad slightly.
        lambda * 1.02
    }

    /// Serializable description with explicit factors.
    pub fn to_config(&self) -> SubstrateConfig {
        SubstrateConfig {
            partition: self.partition.clone(),
            base: BaseConfig {
                a: PerCoordinate::Values(self.base.stiffness.iter().copied().collect()),
                b0: PerCoordinate::Values(self.base.bias.iter().copied().collect()),
                kappa: PerCoordinate::Values(self.base.quartic.iter().copied().collect()),
            },
            couplings: self
                .couplings
                .iter()
                .map(|c| CouplingConfig::Explicit {
                    m: c.source,
                    mp: c.target,
                    u: matrix_rows(&c.u),
                    v: matrix_rows(&c.v),
                })
                .collect(),
            lambda_floor: self.lambda_floor,
            rescale: false,
            trainable: self.trainable,
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn scaled_couplings(src: &[LowRankCoupling], s: f64) -> Vec<LowRankCoupling> {
    let f = s.sqrt();
    src.iter()
        .map(|c| LowRankCoupling {
            source: c.source,
            target: c.target,
            u: &c.u * f,
            v: &c.v * f,
        })
        .collect()
}

fn build_layout(
    partition: &BlockPartition,
    couplings: &[LowRankCoupling],
    mask: TrainableMask,
) -> ThetaLayout {
    let mut segments = Vec::new();
    let mut at = 0;
    for (ci, c) in couplings.iter().enumerate() {
        if mask.u {
            let n = c.u.len();
            segments.push(ThetaSegment {
                kind: SegmentKind::U { coupling: ci },
                range: at..at + n,
            });
            at += n;
        }
        if mask.v {
            let n = c.v.len();
            segments.push(ThetaSegment {
                kind: SegmentKind::V { coupling: ci },
                range: at..at + n,
            });
            at += n;
        }
    }
    let coupling_len = at;
    if mask.bias {
        let n = partition.free_dim();
        segments.push(ThetaSegment {
            kind: SegmentKind::Bias,
            range: at..at + n,
        });
        at += n;
    }
    ThetaLayout {
        segments,
        coupling_len,
        len: at,
    }
}

pub(crate) fn smallest_eigenvalue(h: &DMatrix<f64>) -> f64 {
    if h.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(h.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Configuration format
// ---------------------------------------------------------------------------

/// Per-coordinate value: a constant, an explicit list, or seeded Gaussian draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerCoordinate {
    Uniform(f64),
    Values(Vec<f64>),
    Random(RandomValues),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomValues {
    pub seed: u64,
    #[serde(default)]
    pub mean: f64,
    pub std: f64,
    /// Restrict the draws to these blocks; other coordinates get `mean`.
    #[serde(default)]
    pub blocks: Option<Vec<Block>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Input,
    Hidden,
    Output,
}

impl PerCoordinate {
    pub fn resolve(&self, partition: &BlockPartition, name: &str) -> Result<DVector<f64>> {
        let d = partition.dim();
        match self {
            PerCoordinate::Uniform(v) => Ok(DVector::from_element(d, *v)),
            PerCoordinate::Values(vs) => {
                if vs.len() != d {
                    return Err(ThermoError::InvalidConfig(format!(
                        "{name} has {} entries, expected {d}",
                        vs.len()
                    )));
                }
                Ok(DVector::from_column_slice(vs))
            }
            PerCoordinate::Random(r) => {
                let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
                let mut out = DVector::from_element(d, r.mean);
                let in_block = |i: usize| -> bool {
                    match &r.blocks {
                        None => true,
                        Some(bs) => bs.iter().any(|b| match b {
                            Block::Input => partition.input_range().contains(&i),
                            Block::Hidden => partition.hidden_range().contains(&i),
                            Block::Output => partition.output_range().contains(&i),
                        }),
                    }
                };
                for i in 0..d {
                    let z = normal(&mut rng);
                    if in_block(i) {
                        out[i] = r.mean + r.std * z;
                    }
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub a: PerCoordinate,
    #[serde(default = "zero_per_coordinate")]
    pub b0: PerCoordinate,
    #[serde(default = "zero_per_coordinate")]
    pub kappa: PerCoordinate,
}

fn zero_per_coordinate() -> PerCoordinate {
    PerCoordinate::Uniform(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum CouplingConfig {
    Seeded {
        m: usize,
        mp: usize,
        k: usize,
        seed: u64,
        #[serde(default = "one")]
        gain: f64,
    },
    /// Factors given row by row.
    Explicit {
        m: usize,
        mp: usize,
        u: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

fn one() -> f64 {
    1.0
}

/// JSON-shaped description of a [`SubstrateSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstrateConfig {
    pub partition: BlockPartition,
    pub base: BaseConfig,
    pub couplings: Vec<CouplingConfig>,
    #[serde(default = "default_floor")]
    pub lambda_floor: f64,
    /// Shrink couplings to meet `lambda_floor` instead of rejecting.
    #[serde(default)]
    pub rescale: bool,
    #[serde(default)]
    pub trainable: TrainableMask,
}

fn default_floor() -> f64 {
    DEFAULT_LAMBDA_FLOOR
}

impl CouplingConfig {
    /// Every pair `m < m'` with the same rank, seeds derived from `seed`.
    pub fn all_pairs(num_modules: usize, k: usize, seed: u64, gain: f64) -> Vec<Self> {
        let mut out = Vec::new();
        for m in 0..num_modules {
            for mp in m + 1..num_modules {
                out.push(CouplingConfig::Seeded {
                    m,
                    mp,
                    k,
                    seed: seed
                        .wrapping_mul(1_000_003)
                        .wrapping_add((m * num_modules + mp) as u64),
                    gain,
                });
            }
        }
        out
    }
}

impl SubstrateConfig {
    pub fn build(&self) -> Result<SubstrateSpec> {
        self.partition.validate()?;
        let p = &self.partition;
        let base = BaseEnergy {
            stiffness: self.base.a.resolve(p, "a")?,
            bias: self.base.b0.resolve(p, "b0")?,
            quartic: self.base.kappa.resolve(p, "kappa")?,
        };
        let mut couplings = Vec::with_capacity(self.couplings.len());
        for c in &self.couplings {
            couplings.push(match c {
                CouplingConfig::Seeded {
                    m,
                    mp,
                    k,
                    seed,
                    gain,
                } => {
                    if *m >= p.num_modules() || *mp >= p.num_modules() {
                        return Err(ThermoError::InvalidConfig(format!(
                            "coupling ({m}, {mp}) references a missing module"
                        )));
                    }
                    LowRankCoupling::seeded(
                        *m,
                        *mp,
                        p.module_sizes[*m],
                        p.module_sizes[*mp],
                        *k,
                        *seed,
                        *gain,
                    )
                }
                CouplingConfig::Explicit { m, mp, u, v } => LowRankCoupling {
                    source: *m,
                    target: *mp,
                    u: rows_to_matrix(u)?,
                    v: rows_to_matrix(v)?,
                },
            });
        }
        if self.rescale {
            SubstrateSpec::new_rescaled(
                p.clone(),
                base,
                couplings,
                self.trainable,
                self.lambda_floor,
            )
        } else {
            SubstrateSpec::new(p.clone(), base, couplings, self.trainable, self.lambda_floor)
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(ThermoError::InvalidConfig("ragged factor matrix".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// D = 8: input 2 (with σ channel), hidden 3, output 3; modules 3/3/2.
    pub(crate) fn random_spec(seed: u64, quartic: bool) -> SubstrateSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let partition = BlockPartition::new(2, 3, 3, vec![3, 3, 2], true).unwrap();
        let d = partition.dim();
        let base = BaseEnergy {
            stiffness: DVector::from_fn(d, |_, _| rng.random_range(1.0..2.0)),
            bias: DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5)),
            quartic: DVector::from_fn(d, |_, _| {
                if quartic {
                    rng.random_range(0.0..0.5)
                } else {
                    0.0
                }
            }),
        };
        let couplings = vec![
            LowRankCoupling::seeded(0, 1, 3, 3, 2, seed + 1, 1.0),
            LowRankCoupling::seeded(0, 2, 3, 2, 1, seed + 2, 1.0),
            LowRankCoupling::seeded(1, 2, 3, 2, 2, seed + 3, 1.0),
        ];
        SubstrateSpec::new_rescaled(partition, base, couplings, TrainableMask::default(), 0.1)
            .unwrap()
    }

    fn random_state(spec: &SubstrateSpec, seed: u64) -> StateVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StateVector::new(DVector::from_fn(spec.dim(), |_, _| rng.random_range(-1.0..1.0)))
            .unwrap()
    }

    fn dense_energy(spec: &SubstrateSpec, x: &DVector<f64>) -> f64 {
        let d = spec.dim();
        let mut w = DMatrix::zeros(d, d);
        for c in spec.couplings() {
            let rm = spec.partition().module_range(c.source);
            let rmp = spec.partition().module_range(c.target);
            w.view_mut((rm.start, rmp.start), (rm.len(), rmp.len()))
                .copy_from(&c.dense());
        }
        let b = spec.base();
        let mut e = (x.transpose() * &w * x)[(0, 0)];
        for i in 0..d {
            e += 0.5 * b.stiffness[i] * x[i].powi(2) + 0.25 * b.quartic[i] * x[i].powi(4)
                - b.bias[i] * x[i];
        }
        e
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn single_coupling() -> SubstrateSpec {
        let partition = BlockPartition::new(1, 0, 1, vec![1, 1], false).unwrap();
        let u = DMatrix::from_element(1, 1, 1.0);
        let v = DMatrix::from_element(1, 1, 1.0);
        SubstrateSpec::new(
            partition,
            BaseEnergy::quadratic(2, 1.0),
            vec![LowRankCoupling {
                source: 0,
                target: 1,
                u,
                v,
            }],
            TrainableMask::default(),
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn energy_at_origin_is_zero() {
        let mut spec = random_spec(1, true);
        spec.base.bias.fill(0.0);
        assert_eq!(spec.energy(&StateVector::zeros(8)).unwrap(), 0.0);
    }

    #[test]
    fn energy_single_coupling_hand_value() {
        let spec = single_coupling();
        let x = StateVector::from_slice(&[1.0, 1.0]).unwrap();
        assert_eq!(spec.energy(&x).unwrap(), 2.0);
    }

    #[test]
    fn energy_matches_dense_assembly() {
        for seed in 0..20 {
            let spec = random_spec(seed, seed % 2 == 0);
            let x = random_state(&spec, 100 + seed);
            let e = spec.energy(&x).unwrap();
            assert!((e - dense_energy(&spec, &x)).abs() <= 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let spec = random_spec(3, false);
        let x = StateVector::zeros(5);
        assert!(matches!(
            spec.energy(&x),
            Err(ThermoError::DimensionMismatch { expected: 8, got: 5 })
        ));
        assert!(spec.grad_x(&x).is_err());
        assert!(spec.grad_theta(&x).is_err());
        assert!(spec.hessian_free(&x).is_err());
        assert!(spec.mixed_second(&x).is_err());
    }

    #[test]
    fn grad_x_zero_at_origin_without_bias() {
        let mut spec = random_spec(4, true);
        spec.base.bias.fill(0.0);
        let g = spec.grad_x(&StateVector::zeros(8)).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn grad_x_quartic_component() {
        let mut spec = random_spec(5, false);
        spec.couplings.clear();
        spec.base.stiffness.fill(0.0);
        spec.base.bias.fill(0.0);
        spec.base.quartic.fill(1.0);
        let x = StateVector::new(DVector::from_element(8, 2.0)).unwrap();
        let g = spec.grad_x(&x).unwrap();
        assert_eq!(g[3], 8.0);
    }

    #[test]
    fn grad_x_matches_finite_differences() {
        for seed in 0..20 {
            let spec = random_spec(seed, seed % 2 == 1);
            let x = random_state(&spec, 7 + seed);
            let g = spec.grad_x(&x).unwrap();
            let h = 1e-5;
            let mut xp: DVector<f64> = (*x).clone();
            let fd = DVector::from_fn(spec.dim(), |i, _| {
                let x0 = xp[i];
                xp[i] = x0 + h;
                let ep = spec.energy_raw(&xp);
                xp[i] = x0 - h;
                let em = spec.energy_raw(&xp);
                xp[i] = x0;
                (ep - em) / (2.0 * h)
            });
            assert!(rel_err(&g, &fd) <= 1e-6, "seed {seed}: {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn grad_theta_zero_state_gives_zero_coupling_gradient() {
        let spec = random_spec(6, false);
        let g = spec.grad_theta(&StateVector::zeros(8)).unwrap();
        assert!(g.rows(0, spec.layout().coupling_len).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_theta_hand_value() {
        let spec = single_coupling();
        let x = StateVector::from_slice(&[2.0, 3.0]).unwrap();
        let g = spec.grad_theta(&x).unwrap();
        assert_eq!(g[0], 6.0);
        assert_eq!(g[1], 6.0);
        // Bias of the single free coordinate.
        assert_eq!(g[2], -3.0);
    }

    #[test]
    fn grad_theta_matches_finite_differences() {
        for seed in 0..20 {
            let spec = random_spec(seed, seed % 2 == 0);
            let x = random_state(&spec, 31 + seed);
            let g = spec.grad_theta(&x).unwrap();
            let theta = spec.theta();
            let h = 1e-5;
            let fd = DVector::from_fn(theta.len(), |i, _| {
                let mut tp = theta.clone();
                tp[i] += h;
                let ep = spec.with_theta(&tp).unwrap().energy_raw(&x);
                tp[i] -= 2.0 * h;
                let em = spec.with_theta(&tp).unwrap().energy_raw(&x);
                (ep - em) / (2.0 * h)
            });
            assert!(rel_err(&g, &fd) <= 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn hessian_is_diag_without_couplings() {
        let mut spec = random_spec(8, false);
        spec.couplings.clear();
        let h = spec.hessian_free(&random_state(&spec, 1)).unwrap();
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                let expect = if r == c { spec.base.stiffness[r + 2] } else { 0.0 };
                assert_eq!(h[(r, c)], expect);
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        for seed in 0..20 {
            let spec = random_spec(seed, true);
            let x = random_state(&spec, 51 + seed);
            let h = spec.hessian_free(&x).unwrap();
            let off = spec.partition().input_dim;
            let step = 1e-5;
            let mut xp: DVector<f64> = (*x).clone();
            let mut fd = DMatrix::zeros(h.nrows(), h.ncols());
            for c in 0..h.ncols() {
                let x0 = xp[c + off];
                xp[c + off] = x0 + step;
                let gp = spec.grad_x(&StateVector::new(xp.clone()).unwrap()).unwrap();
                xp[c + off] = x0 - step;
                let gm = spec.grad_x(&StateVector::new(xp.clone()).unwrap()).unwrap();
                xp[c + off] = x0;
                for r in 0..h.nrows() {
                    fd[(r, c)] = (gp[r + off] - gm[r + off]) / (2.0 * step);
                }
            }
            assert!((&h - &fd).norm() / fd.norm() <= 1e-5, "seed {seed}");
            assert_relative_eq!(h.clone(), h.transpose(), epsilon = 1e-14);
        }
    }

    #[test]
    fn constructed_specs_respect_floor() {
        for seed in 0..10 {
            let spec = random_spec(seed, true);
            let h = spec.hessian_free(&StateVector::zeros(8)).unwrap();
            assert!(smallest_eigenvalue(&h) >= spec.lambda_floor());
        }
    }

    #[test]
    fn construction_rejects_soft_spec_and_rescale_reports() {
        // Modules of size 1: input (0), hidden (1), output (2). H = [[1, 2], [2, 1]].
        let partition = BlockPartition::new(1, 1, 1, vec![1, 1, 1], false).unwrap();
        let strong = LowRankCoupling {
            source: 1,
            target: 2,
            u: DMatrix::from_element(1, 1, 2.0),
            v: DMatrix::from_element(1, 1, 1.0),
        };
        let base = BaseEnergy::quadratic(3, 1.0);
        let err = SubstrateSpec::new(
            partition.clone(),
            base.clone(),
            vec![strong.clone()],
            TrainableMask::default(),
            0.1,
        )
        .unwrap_err();
        match err {
            ThermoError::StiffnessViolation { lambda_min, .. } => {
                assert!((lambda_min + 1.0).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        let spec =
            SubstrateSpec::new_rescaled(partition, base, vec![strong], TrainableMask::default(), 0.1)
                .unwrap();
        let rep = spec.stiffness();
        // 1 - 2s >= 0.1  =>  s = 0.45
        assert!((rep.coupling_rescale - 0.45).abs() < 1e-9);
        assert!(rep.lambda_min >= 0.1 && rep.lambda_min < 0.1 + 1e-9);
        assert!((rep.lambda_min_before_rescale + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_second_matches_finite_differences() {
        for seed in 0..20 {
            let spec = random_spec(seed, seed % 3 == 0);
            let x = random_state(&spec, 71 + seed);
            let m = spec.mixed_second(&x).unwrap();
            let off = spec.partition().input_dim;
            let h = 1e-5;
            let mut xp: DVector<f64> = (*x).clone();
            let mut fd = DMatrix::zeros(m.nrows(), m.ncols());
            for c in 0..m.ncols() {
                let x0 = xp[c + off];
                xp[c + off] = x0 + h;
                let gp = spec.grad_theta_raw(&xp);
                xp[c + off] = x0 - h;
                let gm = spec.grad_theta_raw(&xp);
                xp[c + off] = x0;
                fd.set_column(c, &((gp - gm) / (2.0 * h)));
            }
            assert!((&m - &fd).norm() / fd.norm() <= 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn mixed_second_bias_rows_and_origin() {
        let spec = random_spec(9, true);
        let m = spec.mixed_second(&StateVector::zeros(8)).unwrap();
        let cl = spec.layout().coupling_len;
        // All modules touch free coordinates only through x = 0 partners: zero rows.
        assert!(m.rows(0, cl).iter().all(|&v| v == 0.0));
        for f in 0..spec.partition().free_dim() {
            for c in 0..m.ncols() {
                assert_eq!(m[(cl + f, c)], if c == f { -1.0 } else { 0.0 });
            }
        }
        // Clamped nonzero input makes coupling rows nonzero.
        let mut x = DVector::zeros(8);
        x[0] = 1.0;
        let m = spec.mixed_second(&StateVector::new(x).unwrap()).unwrap();
        assert!(m.rows(0, cl).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn third_mixed_coupling_rows_match_analytic_constants() {
        // For U_rj of coupling (m, m'):
        // ∂³E/∂U_rj ∂x_a ∂x_b = [a = row r of m] V_(b,j) [b in m'] + (a <-> b).
        let spec = random_spec(14, true);
        let x = random_state(&spec, 5);
        let slabs = spec.mixed_third_fd(&x, 1e-3).unwrap();
        let p = spec.partition();
        let off = p.input_dim;
        for seg in &spec.layout().segments {
            let SegmentKind::U { coupling } = seg.kind else { continue };
            let c = &spec.couplings()[coupling];
            let rm = p.module_range(c.source);
            let rmp = p.module_range(c.target);
            let rows = c.u.nrows();
            for j in 0..c.rank() {
                for r in 0..rows {
                    let row = seg.range.start + r + j * rows;
                    let own = rm.start + r;
                    for (l, slab) in slabs.iter().enumerate() {
                        let gl = l + off;
                        for col in 0..slab.ncols() {
                            let gc = col + off;
                            let mut expect = 0.0;
                            if gc == own && rmp.contains(&gl) {
                                expect += c.v[(gl - rmp.start, j)];
                            }
                            if gl == own && rmp.contains(&gc) {
                                expect += c.v[(gc - rmp.start, j)];
                            }
                            assert!((slab[(row, col)] - expect).abs() < 1e-9);
                        }
                    }
                }
            }
        }
        // Bias rows: E is linear in b0, so their slab rows vanish.
        let cl = spec.layout().coupling_len;
        for slab in &slabs {
            assert!(slab.rows(cl, slab.nrows() - cl).iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn third_x_diagonal_is_six_kappa_x() {
        let spec = random_spec(10, true);
        let x = random_state(&spec, 4);
        let diag = spec.third_x_diagonal(&x, 1e-4).unwrap();
        let off = spec.partition().input_dim;
        for f in 0..diag.len() {
            let expect = 6.0 * spec.base.quartic[f + off] * x[f + off];
            assert!((diag[f] - expect).abs() < 1e-6);
        }
        assert!(diag.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn theta_roundtrip() {
        let spec = random_spec(11, false);
        let t = spec.theta();
        let again = spec.with_theta(&t).unwrap();
        assert_eq!(again, spec);
        assert_eq!(t.len(), spec.num_params());
    }

    #[test]
    fn config_roundtrip_through_json() {
        let spec = random_spec(12, true);
        let json = serde_json::to_string(&spec.to_config()).unwrap();
        let back: SubstrateConfig = serde_json::from_str(&json).unwrap();
        let rebuilt = back.build().unwrap();
        assert_eq!(rebuilt.theta(), spec.theta());
        assert_eq!(rebuilt.base(), spec.base());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let json = r#"{"partition":{"input_dim":1,"hidden_dim":0,"output_dim":1,"module_sizes":[1,1]},
            "base":{"a":1.0},"couplings":[],"bogus":1}"#;
        assert!(serde_json::from_str::<SubstrateConfig>(json).is_err());
    }

    #[test]
    fn power_iteration_bounds_spectrum() {
        let spec = random_spec(13, true);
        let x = random_state(&spec, 2);
        let h = spec.hessian_free(&x).unwrap();
        let top = SymmetricEigen::new(h)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let est = spec.lambda_max_estimate(&x);
        assert!(est >= top * 0.999 && est <= top * 1.05, "{est} vs {top}");
    }
}
