//! Orthogonal adapters through the Cayley transform, the additive low-rank
//! baseline, and hyperspherical-energy diagnostics.
//!
//! An orthogonal adapter stores the strict upper triangle of a skew-symmetric
//! `C` and left-multiplies a frozen weight `W₀` (`d×n`, one neuron per column)
//! by `A = (I + C)⁻¹(I − C)`. Since `C = 0` gives `A = I`, a fresh adapter
//! reproduces the pretrained layer exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, skew_from_upper, Lu, Matrix, Tape, Var};

/// Largest `|Cᵀ + C|` entry accepted as skew-symmetric.
pub const SKEW_TOLERANCE: f64 = 1e-12;
/// Neurons closer than this after normalization make the energy infinite.
pub const COINCIDENT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_LOW_RANK: usize = 4;
pub const LOW_RANK_INIT_SCALE: f64 = 0.01;

/// Trainable strict upper triangle of a skew-symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewParam {
    dim: usize,
    upper: Vec<f64>,
}

impl SkewParam {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            upper: vec![0.0; Self::count(dim)],
        }
    }

    pub fn from_upper(dim: usize, upper: Vec<f64>) -> Result<Self> {
        if upper.len() != Self::count(dim) {
            return Err(Error::dim(
                "skew_param",
                format!("{} entries for dim {dim}, expected {}", upper.len(), Self::count(dim)),
            ));
        }
        Ok(Self { dim, upper })
    }

    /// `d(d−1)/2`.
    pub fn count(dim: usize) -> usize {
        dim * dim.saturating_sub(1) / 2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }

    /// Parameters as a `1×len` row, the layout used on the tape.
    pub fn as_row(&self) -> Matrix {
        Matrix::from_vec(1, self.upper.len(), self.upper.clone()).expect("row length")
    }
}

pub fn materialize_skew(p: &SkewParam) -> Matrix {
    skew_from_upper(&p.upper, p.dim)
}

fn check_skew(c: &Matrix) -> Result<()> {
    let (r, k) = c.shape();
    if r != k {
        return Err(Error::dim("cayley", format!("{r}x{k} is not square")));
    }
    for i in 0..r {
        for j in i..r {
            let asym = (c.get(i, j) + c.get(j, i)).abs();
            if asym > SKEW_TOLERANCE {
                return Err(Error::contract(format!(
                    "matrix is not skew-symmetric: |C[{i},{j}] + C[{j},{i}]| = {asym:e}"
                )));
            }
        }
    }
    Ok(())
}

/// `A = (I + C)⁻¹(I − C)` for skew-symmetric `C`.
///
/// `I + C` is always invertible for real skew `C`; a solver failure here means
/// the input was corrupted (non-finite entries, for instance).
pub fn cayley(c: &Matrix) -> Result<Matrix> {
    check_skew(c)?;
    let i = Matrix::identity(c.rows());
    Lu::factor(&i.add(c)?)?.solve(&i.sub(c)?)
}

/// Differentiable Cayley transform of a tape variable holding `C`.
pub fn cayley_on_tape<'t>(tape: &'t Tape, c: Var<'t>) -> Result<Var<'t>> {
    let i = tape.constant(Matrix::identity(c.shape().0));
    i.add(c)?.solve(i.sub(c)?)
}

/// `C = (I + A)⁻¹(I − A)`, the preimage of an orthogonal `A` with no
/// eigenvalue at −1.
pub fn cayley_inverse(a: &Matrix) -> Result<Matrix> {
    let (r, k) = a.shape();
    if r != k {
        return Err(Error::dim("cayley_inverse", format!("{r}x{k} is not square")));
    }
    let i = Matrix::identity(r);
    match Lu::factor(&i.add(a)?) {
        Ok(lu) => lu.solve(&i.sub(a)?),
        Err(Error::Singular { pivot, magnitude }) => Err(Error::Domain(format!(
            "I + A is singular at pivot {pivot} (|pivot| = {magnitude:e}); A has an eigenvalue at -1"
        ))),
        Err(e) => Err(e),
    }
}

/// Max entry of `|AᵀA − I|`.
pub fn orthogonality_residual(a: &Matrix) -> Result<f64> {
    a.transpose().matmul(a)?.max_abs_diff(&Matrix::identity(a.cols()))
}

/// `(‖A − (I + 2C)‖_F, ‖A − (I − 2C)‖_F)` with `A = cayley(C)`.
///
/// Expanding `(I + C)⁻¹ = I − C + C² − …` gives `A = I − 2C + 2C² + …`, so the
/// second component is the one that shrinks quadratically in `‖C‖`.
pub fn neumann_deviation(c: &Matrix) -> Result<(f64, f64)> {
    let a = cayley(c)?;
    let i = Matrix::identity(c.rows());
    let plus = a.sub(&i.add(&c.scale(2.0))?)?.frobenius_norm();
    let minus = a.sub(&i.sub(&c.scale(2.0))?)?.frobenius_norm();
    Ok((plus, minus))
}

/// `Σ_{i≠j} ‖ŵᵢ − ŵⱼ‖⁻¹` over ordered pairs of normalized columns.
pub fn hyperspherical_energy(w: &Matrix) -> Result<f64> {
    let (d, n) = w.shape();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let col = w.col(j);
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > COINCIDENT_TOLERANCE) {
            return Err(Error::DegenerateNeuron { index: j, norm });
        }
        cols.push(col.into_iter().map(|v| v / norm).collect());
    }
    let mut energy = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dist = (0..d)
                .map(|k| (cols[i][k] - cols[j][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist <= COINCIDENT_TOLERANCE {
                return Err(Error::InfiniteEnergy { first: i, second: j });
            }
            energy += 2.0 / dist;
        }
    }
    Ok(energy)
}

/// `|HE(W) − HE(W₀)| / HE(W₀)`.
pub fn energy_drift(w: &Matrix, w0: &Matrix) -> Result<f64> {
    let base = hyperspherical_energy(w0)?;
    Ok((hyperspherical_energy(w)? - base).abs() / base)
}

/// Orthogonal adapter with its materialized rotation cached.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalAdapter {
    skew: SkewParam,
    rotation: Matrix,
}

impl OrthogonalAdapter {
    /// Identity adapter (`C = 0`).
    pub fn identity(dim: usize) -> Self {
        Self {
            skew: SkewParam::zeros(dim),
            rotation: Matrix::identity(dim),
        }
    }

    pub fn from_skew(skew: SkewParam) -> Result<Self> {
        let rotation = cayley(&materialize_skew(&skew))?;
        Ok(Self { skew, rotation })
    }

    pub fn skew(&self) -> &SkewParam {
        &self.skew
    }

    pub fn rotation(&self) -> &Matrix {
        &self.rotation
    }

    pub fn dim(&self) -> usize {
        self.skew.dim
    }

    /// Replaces the parameters and re-materializes `A`.
    pub fn set_upper(&mut self, upper: Vec<f64>) -> Result<()> {
        *self = Self::from_skew(SkewParam::from_upper(self.skew.dim, upper)?)?;
        Ok(())
    }

    pub fn residual(&self) -> f64 {
        orthogonality_residual(&self.rotation).expect("square rotation")
    }

    pub fn determinant(&self) -> f64 {
        tensor::determinant(&self.rotation).expect("square rotation")
    }
}

/// Additive `W₀ + down·up` baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    down: Matrix,
    up: Matrix,
}

impl LowRankAdapter {
    /// `down` uniform in `±LOW_RANK_INIT_SCALE`, `up` zero, so the update
    /// starts at exactly zero.
    pub fn new(rows: usize, cols: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let down = Matrix::from_fn(rows, rank, |_, _| {
            rng.random_range(-LOW_RANK_INIT_SCALE..LOW_RANK_INIT_SCALE)
        });
        Self {
            down,
            up: Matrix::zeros(rank, cols),
        }
    }

    pub fn from_parts(down: Matrix, up: Matrix) -> Result<Self> {
        if down.cols() != up.rows() {
            return Err(Error::dim(
                "low_rank",
                format!("down {:?} and up {:?} disagree on rank", down.shape(), up.shape()),
            ));
        }
        Ok(Self { down, up })
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn set(&mut self, down: Matrix, up: Matrix) -> Result<()> {
        if down.shape() != self.down.shape() || up.shape() != self.up.shape() {
            return Err(Error::dim("low_rank", "replacement factors change shape"));
        }
        self.down = down;
        self.up = up;
        Ok(())
    }

    pub fn delta(&self) -> Matrix {
        self.down.matmul(&self.up).expect("rank agrees")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    None,
    Orthogonal(OrthogonalAdapter),
    LowRank(LowRankAdapter),
}

impl Adapter {
    pub fn trainable_count(&self) -> usize {
        match self {
            Adapter::None => 0,
            Adapter::Orthogonal(o) => o.skew.len(),
            Adapter::LowRank(l) => l.down.len() + l.up.len(),
        }
    }
}

/// Which adapter family to attach when finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    Orthogonal,
    LowRank,
    None,
}

impl AdapterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMode::Orthogonal => "orthogonal",
            AdapterMode::LowRank => "lowrank",
            AdapterMode::None => "none",
        }
    }
}

impl std::str::FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(AdapterMode::Orthogonal),
            "lowrank" => Ok(AdapterMode::LowRank),
            "none" => Ok(AdapterMode::None),
            other => Err(Error::contract(format!(
                "unknown adapter mode {other:?} (expected orthogonal, lowrank or none)"
            ))),
        }
    }
}

/// A frozen pretrained weight plus its live adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear {
    w0: Matrix,
    adapter: Adapter,
}

impl FrozenLinear {
    pub fn new(w0: Matrix) -> Self {
        Self {
            w0,
            adapter: Adapter::None,
        }
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    /// Mutable pretrained weight; only toy pretraining writes through this.
    pub(crate) fn w0_mut(&mut self) -> &mut Matrix {
        &mut self.w0
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut Adapter {
        &mut self.adapter
    }

    pub fn in_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.cols()
    }

    /// Installs an adapter after checking it fits `W₀`.
    pub fn attach(&mut self, adapter: Adapter) -> Result<()> {
        let ok = match &adapter {
            Adapter::None => true,
            Adapter::Orthogonal(o) => o.dim() == self.w0.rows(),
            Adapter::LowRank(l) => {
                l.down.rows() == self.w0.rows() && l.up.cols() == self.w0.cols()
            }
        };
        if !ok {
            return Err(Error::dim(
                "attach",
                format!("adapter does not fit a {}x{} weight", self.w0.rows(), self.w0.cols()),
            ));
        }
        self.adapter = adapter;
        Ok(())
    }

    pub fn detach_adapter(&mut self) -> Adapter {
        std::mem::replace(&mut self.adapter, Adapter::None)
    }

    /// `A·W₀`, `W₀ + down·up`, or `W₀`.
    pub fn effective_weight(&self) -> Matrix {
        match &self.adapter {
            Adapter::None => self.w0.clone(),
            Adapter::Orthogonal(o) => o.rotation.matmul(&self.w0).expect("adapter fits"),
            Adapter::LowRank(l) => self.w0.add(&l.delta()).expect("adapter fits"),
        }
    }

    /// `z = Wᵀx` for a column batch `x` (`d×b`).
    pub fn effective_forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.w0.rows() {
            return Err(Error::dim(
                "effective_forward",
                format!("input has {} rows, weight expects {}", x.rows(), self.w0.rows()),
            ));
        }
        self.effective_weight().transpose().matmul(x)
    }
}
