//! Low-rank adapters and their initialization strategies.
//!
//! Every strategy produces an [`AdaptedLayer`] whose frozen residual is
//! `W₀ - s·B·A`, so the layer computes exactly `W₀·x + bias` at
//! initialization no matter how `A` and `B` were chosen.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_tn, sym_eigh, thin_svd, EigenSystem, Matrix, SvdSelection};
use crate::rng::{gaussian_matrix, seeded};

/// Where in the eigenvalue spectrum a quantile strategy takes its window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quantile {
    Top,
    /// Upper quartile: window centered at index `⌊d/4⌋`.
    Q3,
    Median,
    /// Lower quartile: window centered at index `⌊3d/4⌋`.
    Q1,
    Random,
    Tail,
}

impl Quantile {
    pub const ALL: [Quantile; 6] =
        [Quantile::Top, Quantile::Q3, Quantile::Median, Quantile::Q1, Quantile::Random, Quantile::Tail];

    fn tag(self) -> &'static str {
        match self {
            Quantile::Top => "top",
            Quantile::Q3 => "q3",
            Quantile::Median => "median",
            Quantile::Q1 => "q1",
            Quantile::Random => "random",
            Quantile::Tail => "tail",
        }
    }

    /// Eigenvector column indices (into a descending spectrum of size `d`)
    /// selected for rank `r`.
    pub fn columns(self, d: usize, r: usize, seed: u64) -> Result<Vec<usize>> {
        if r == 0 || r > d {
            return Err(Error::InvalidRank { rank: r, max: d });
        }
        let centered = |center: usize| {
            let start = center.saturating_sub(r / 2).min(d - r);
            (start..start + r).collect::<Vec<_>>()
        };
        Ok(match self {
            Quantile::Top => (0..r).collect(),
            Quantile::Q3 => centered(d / 4),
            Quantile::Median => centered(d / 2),
            Quantile::Q1 => centered(3 * d / 4),
            Quantile::Tail => (d - r..d).collect(),
            Quantile::Random => {
                let mut rng = seeded(seed);
                let mut cols = sample(&mut rng, d, r).into_vec();
                cols.sort_unstable();
                cols
            }
        })
    }
}

/// Adapter initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InitStrategy {
    /// Gaussian `A`, zero `B`.
    Vanilla,
    /// Top-`r` singular triplets of the weight.
    Pissa,
    /// Bottom-`r` singular triplets of the weight.
    Milora,
    /// Eigenvectors of the `r` smallest output-activation covariance
    /// eigenvalues.
    AstraTail,
    /// Eigenvector windows elsewhere in the covariance spectrum.
    Quantile(Quantile),
}

impl InitStrategy {
    pub fn requires_covariance(self) -> bool {
        matches!(self, InitStrategy::AstraTail | InitStrategy::Quantile(_))
    }

    /// Builds the adapted layer for weight `w0`. `cov` is the layer's
    /// output-activation covariance, required for covariance strategies.
    pub fn initialize(
        self,
        w0: &Matrix,
        cov: Option<&Matrix>,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<AdaptedLayer> {
        let need_cov = || {
            cov.ok_or_else(|| Error::InvalidArgument(format!("strategy `{self}` requires a covariance matrix")))
        };
        match self {
            InitStrategy::Vanilla => init_vanilla(w0, rank, alpha, seed),
            InitStrategy::Pissa => init_pissa(w0, rank, alpha),
            InitStrategy::Milora => init_milora(w0, rank, alpha),
            InitStrategy::AstraTail => init_astra(w0, need_cov()?, rank, alpha),
            InitStrategy::Quantile(q) => init_quantile(w0, need_cov()?, rank, alpha, q, seed),
        }
    }

    /// Like [`initialize`](Self::initialize) but takes the covariance's
    /// eigensystem instead of the covariance.
    pub fn initialize_from_eigen(
        self,
        w0: &Matrix,
        eig: Option<&EigenSystem>,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<AdaptedLayer> {
        let (window, seed) = match self {
            InitStrategy::AstraTail => (Quantile::Tail, 0),
            InitStrategy::Quantile(q) => (q, seed),
            _ => return self.initialize(w0, None, rank, alpha, seed),
        };
        let eig = eig.ok_or_else(|| {
            Error::InvalidArgument(format!("strategy `{self}` requires a covariance eigensystem"))
        })?;
        let mut layer = init_window_from_eigen(w0, eig, rank, alpha, window, seed)?;
        layer.strategy = self;
        Ok(layer)
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::Vanilla => f.write_str("vanilla"),
            InitStrategy::Pissa => f.write_str("pissa"),
            InitStrategy::Milora => f.write_str("milora"),
            InitStrategy::AstraTail => f.write_str("astra_tail"),
            InitStrategy::Quantile(q) => write!(f, "quantile:{}", q.tag()),
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "vanilla" | "lora" => InitStrategy::Vanilla,
            "pissa" => InitStrategy::Pissa,
            "milora" => InitStrategy::Milora,
            "astra_tail" | "astra" => InitStrategy::AstraTail,
            _ => {
                let q = s
                    .strip_prefix("quantile:")
                    .and_then(|tag| Quantile::ALL.into_iter().find(|q| q.tag() == tag))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown init strategy `{s}`")))?;
                InitStrategy::Quantile(q)
            }
        })
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for InitStrategy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for InitStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Trainable low-rank factors: the update is `s · B · A` with `s = alpha / rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    /// `rank × d_in`
    pub a: Matrix,
    /// `d_out × rank`
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterPair {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let rank = a.rows();
        if b.cols() != rank {
            return Err(Error::DimensionMismatch { op: "AdapterPair::new", left: b.shape(), right: a.shape() });
        }
        if rank > a.cols().min(b.rows()) {
            return Err(Error::InvalidRank { rank, max: a.cols().min(b.rows()) });
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(Self { a, b, rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// `(d_in + d_out) · rank`.
    pub fn trainable_parameters(&self) -> usize {
        (self.d_in() + self.d_out()) * self.rank
    }

    /// `s · B · A`, materialized.
    pub fn delta(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("adapter factors agree").scale(self.scaling())
    }
}

/// A linear layer carrying a frozen residual plus a trainable adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    pub w_frozen: Matrix,
    pub bias: Option<Vec<f64>>,
    pub adapter: AdapterPair,
    /// The weight the layer was initialized from, kept for verification.
    pub w_original: Matrix,
    pub strategy: InitStrategy,
    pub seed: u64,
    /// Non-fatal findings during initialization (e.g. a rank-deficient
    /// covariance whose tail is partly null space).
    pub warnings: Vec<String>,
}

impl AdaptedLayer {
    fn build(w0: &Matrix, a: Matrix, b: Matrix, alpha: f64, strategy: InitStrategy, seed: u64) -> Result<Self> {
        let adapter = AdapterPair::new(a, b, alpha)?;
        let w_frozen = w0.sub(&adapter.delta())?;
        Ok(Self {
            w_frozen,
            bias: None,
            adapter,
            w_original: w0.clone(),
            strategy,
            seed,
            warnings: Vec::new(),
        })
    }

    pub fn with_bias(mut self, bias: Option<Vec<f64>>) -> Self {
        self.bias = bias;
        self
    }

    pub fn d_in(&self) -> usize {
        self.w_frozen.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_frozen.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.adapter.scaling()
    }

    /// `w_frozen + s·B·A`.
    pub fn merge(&self) -> Matrix {
        self.w_frozen.add(&self.adapter.delta()).expect("shapes agree")
    }

    /// Layer output in factored order; also returns the adapter's hidden
    /// activations `A·x`, which the backward pass reuses.
    pub fn forward_with_hidden(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.rows() != self.d_in() {
            return Err(Error::DimensionMismatch { op: "adapted_forward", left: self.w_frozen.shape(), right: x.shape() });
        }
        let hidden = matmul(&self.adapter.a, x)?;
        let mut out = matmul(&self.w_frozen, x)?;
        out.add_scaled_in_place(self.scaling(), &matmul(&self.adapter.b, &hidden)?)?;
        if let Some(bias) = &self.bias {
            add_bias(&mut out, bias);
        }
        Ok((out, hidden))
    }
}

/// `w_frozen·x + bias + s·B·(A·x)`, never forming `B·A`.
pub fn adapted_forward(layer: &AdaptedLayer, x: &Matrix) -> Result<Matrix> {
    layer.forward_with_hidden(x).map(|(out, _)| out)
}

/// Adapted weight `w_frozen + s·B·A`.
pub fn merge(layer: &AdaptedLayer) -> Matrix {
    layer.merge()
}

pub(crate) fn add_bias(out: &mut Matrix, bias: &[f64]) {
    for (i, b) in bias.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v += b);
    }
}

fn check_rank(w0: &Matrix, r: usize) -> Result<()> {
    let max = w0.rows().min(w0.cols());
    if r == 0 || r > max {
        return Err(Error::InvalidRank { rank: r, max });
    }
    Ok(())
}

/// Standard LoRA: `A ~ N(0, 1/d_in)`, `B = 0`.
pub fn init_vanilla(w0: &Matrix, r: usize, alpha: f64, seed: u64) -> Result<AdaptedLayer> {
    check_rank(w0, r)?;
    let d_in = w0.cols();
    let mut rng = seeded(seed);
    let a = gaussian_matrix(&mut rng, r, d_in, 1.0 / libm::sqrt(d_in as f64));
    let b = Matrix::zeros(w0.rows(), r);
    let mut layer = AdaptedLayer::build(w0, a, b, alpha, InitStrategy::Vanilla, seed)?;
    // B = 0, so the residual is the original weight exactly.
    layer.w_frozen = w0.clone();
    Ok(layer)
}

fn init_from_svd(w0: &Matrix, r: usize, alpha: f64, which: SvdSelection, strategy: InitStrategy) -> Result<AdaptedLayer> {
    check_rank(w0, r)?;
    let svd = thin_svd(w0, r, which)?;
    let root: Vec<f64> = svd.singular_values.iter().map(|s| libm::sqrt(*s)).collect();
    let b = crate::linalg::svd_scale_columns(&svd.u, &root);
    let a = crate::linalg::svd_scale_columns(&svd.v, &root).transpose();
    AdaptedLayer::build(w0, a, b, alpha, strategy, 0)
}

/// Principal singular subspace: `B = U_r·√S_r`, `A = √S_r·V_rᵀ`.
pub fn init_pissa(w0: &Matrix, r: usize, alpha: f64) -> Result<AdaptedLayer> {
    init_from_svd(w0, r, alpha, SvdSelection::Top, InitStrategy::Pissa)
}

/// Minor singular subspace: like [`init_pissa`] with the bottom `r` triplets.
pub fn init_milora(w0: &Matrix, r: usize, alpha: f64) -> Result<AdaptedLayer> {
    init_from_svd(w0, r, alpha, SvdSelection::Bottom, InitStrategy::Milora)
}

/// Tail-eigenvector initialization: `B = Q_tail`, `A = Q_tailᵀ·W₀`, where
/// `Q_tail` holds the eigenvectors of the `r` smallest eigenvalues of the
/// output-activation covariance.
pub fn init_astra(w0: &Matrix, cov: &Matrix, r: usize, alpha: f64) -> Result<AdaptedLayer> {
    let mut layer = init_eigen_window(w0, cov, r, alpha, Quantile::Tail, 0)?;
    layer.strategy = InitStrategy::AstraTail;
    Ok(layer)
}

/// Eigenvector-window initialization used by the spectrum ablation. The
/// `Tail` window reproduces [`init_astra`].
pub fn init_quantile(w0: &Matrix, cov: &Matrix, r: usize, alpha: f64, which: Quantile, seed: u64) -> Result<AdaptedLayer> {
    init_eigen_window(w0, cov, r, alpha, which, seed)
}

fn init_eigen_window(w0: &Matrix, cov: &Matrix, r: usize, alpha: f64, which: Quantile, seed: u64) -> Result<AdaptedLayer> {
    let d = w0.rows();
    if cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch { op: "covariance vs weight", left: cov.shape(), right: w0.shape() });
    }
    init_window_from_eigen(w0, &sym_eigh(cov)?, r, alpha, which, seed)
}

/// [`init_quantile`] from an already computed covariance eigensystem, so
/// several windows of one layer can share a decomposition.
pub fn init_window_from_eigen(
    w0: &Matrix,
    es: &EigenSystem,
    r: usize,
    alpha: f64,
    which: Quantile,
    seed: u64,
) -> Result<AdaptedLayer> {
    let d = w0.rows();
    if es.dim() != d {
        return Err(Error::DimensionMismatch { op: "covariance vs weight", left: (es.dim(), es.dim()), right: w0.shape() });
    }
    check_rank(w0, r)?;
    let cols = which.columns(d, r, seed)?;
    let q = es.eigenvectors.select_columns(&cols)?;
    let a = matmul_tn(&q, w0)?;
    let mut layer = AdaptedLayer::build(w0, a, q, alpha, InitStrategy::Quantile(which), seed)?;

    let lmax = es.eigenvalues[0];
    let null = cols.iter().filter(|&&c| es.eigenvalues[c] <= 1e-12 * lmax.max(f64::MIN_POSITIVE)).count();
    if null > 0 {
        layer.warnings.push(format!(
            "{null} of {r} selected eigenvectors belong to (numerically) zero covariance eigenvalues"
        ));
    }
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_error, project};
    use crate::rng::{gaussian_matrix, seeded};

    fn random_cov(seed: u64, d: usize) -> Matrix {
        let mut rng = seeded(seed);
        gaussian_matrix(&mut rng, d + 3, d, 1.0).gram()
    }

    fn w(seed: u64, m: usize, n: usize) -> Matrix {
        gaussian_matrix(&mut seeded(seed), m, n, 1.0)
    }

    #[test]
    fn vanilla_preserves_output_exactly() {
        let w0 = w(1, 5, 7);
        let layer = init_vanilla(&w0, 3, 3.0, 42).unwrap().with_bias(Some(alloc::vec![0.5; 5]));
        let x = w(2, 7, 4);
        let mut expected = matmul(&w0, &x).unwrap();
        add_bias(&mut expected, &[0.5; 5]);
        assert_eq!(adapted_forward(&layer, &x).unwrap(), expected);
        assert_eq!(layer.w_frozen, w0);
    }

    #[test]
    fn vanilla_is_seeded() {
        let w0 = w(1, 5, 7);
        let a1 = init_vanilla(&w0, 2, 2.0, 9).unwrap().adapter.a;
        let a2 = init_vanilla(&w0, 2, 2.0, 9).unwrap().adapter.a;
        let a3 = init_vanilla(&w0, 2, 2.0, 10).unwrap().adapter.a;
        assert_eq!(a1, a2);
        assert_ne!(a1, a3);
    }

    #[test]
    fn vanilla_fan_in_std_matches_kaiming() {
        let d_in = 256;
        let layer = init_vanilla(&Matrix::zeros(128, d_in), 64, 64.0, 5).unwrap();
        let a = &layer.adapter.a;
        let target = 1.0 / libm::sqrt(d_in as f64);
        for i in 0..a.rows() {
            let row = a.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (row.len() - 1) as f64;
            let std = libm::sqrt(var);
            assert!((std - target).abs() < 0.2 * target, "row {i}: {std}");
        }
    }

    #[test]
    fn pissa_on_diagonal() {
        let w0 = Matrix::diag(&[5.0, 3.0, 1.0]).unwrap();
        let layer = init_pissa(&w0, 1, 1.0).unwrap();
        assert!(layer.adapter.delta().max_abs_diff(&Matrix::diag(&[5.0, 0.0, 0.0]).unwrap()) < 1e-12);
        assert!(layer.w_frozen.max_abs_diff(&Matrix::diag(&[0.0, 3.0, 1.0]).unwrap()) < 1e-12);
    }

    #[test]
    fn pissa_full_rank_empties_the_residual() {
        let w0 = w(3, 4, 6);
        let layer = init_pissa(&w0, 4, 4.0).unwrap();
        assert!(layer.w_frozen.max_abs() < 1e-8);
    }

    #[test]
    fn milora_on_diagonal() {
        let w0 = Matrix::diag(&[5.0, 3.0, 1.0]).unwrap();
        let layer = init_milora(&w0, 1, 1.0).unwrap();
        assert!(layer.adapter.delta().max_abs_diff(&Matrix::diag(&[0.0, 0.0, 1.0]).unwrap()) < 1e-12);
    }

    #[test]
    fn pissa_and_milora_components_complete_the_weight() {
        let w0 = w(4, 6, 6);
        let top = init_pissa(&w0, 2, 2.0).unwrap().adapter.delta();
        let bottom = init_milora(&w0, 3, 3.0).unwrap().adapter.delta();
        let middle_svd = thin_svd(&w0, 6, SvdSelection::Top).unwrap();
        let middle = SvdSystemSlice::component(&middle_svd, 2, 3);
        let total = top.add(&bottom).unwrap().add(&middle).unwrap();
        assert!(total.max_abs_diff(&w0) < 1e-9);
    }

    struct SvdSystemSlice;
    impl SvdSystemSlice {
        fn component(svd: &crate::linalg::SvdSystem, start: usize, end: usize) -> Matrix {
            let mut acc = Matrix::zeros(svd.u.rows(), svd.v.rows());
            for j in start..end {
                let u = Matrix::column(&svd.u.col(j)).unwrap();
                let v = Matrix::column(&svd.v.col(j)).unwrap();
                acc.add_scaled_in_place(svd.singular_values[j], &crate::linalg::matmul_nt(&u, &v).unwrap()).unwrap();
            }
            acc
        }
    }

    #[test]
    fn astra_isolates_tail_row_on_diagonal_covariance() {
        let cov = Matrix::diag(&[9.0, 4.0, 1.0]).unwrap();
        let w0 = w(5, 3, 4);
        let layer = init_astra(&w0, &cov, 1, 1.0).unwrap();
        assert_eq!(layer.adapter.b, Matrix::column(&[0.0, 0.0, 1.0]).unwrap());
        let delta = layer.adapter.delta();
        for i in 0..3 {
            for j in 0..4 {
                let want = if i == 2 { w0.get(2, j) } else { 0.0 };
                assert!((delta.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn astra_moves_tail_out_of_the_residual() {
        let w0 = w(6, 8, 5);
        let cov = random_cov(7, 8);
        let layer = init_astra(&w0, &cov, 3, 3.0).unwrap();
        let q_tail = &layer.adapter.b;
        assert!(matmul_tn(q_tail, &layer.w_frozen).unwrap().max_abs() < 1e-9);
        assert!(orthonormality_error(q_tail) < 1e-10);
        let es = sym_eigh(&cov).unwrap();
        let q_main = es.main(3).unwrap();
        assert!(matmul_tn(&q_main, q_tail).unwrap().max_abs() < 1e-10);
        assert!(layer.w_frozen.max_abs_diff(&project(&q_main, &w0).unwrap()) < 1e-9);
        assert!(layer.adapter.delta().max_abs_diff(&project(q_tail, &w0).unwrap()) < 1e-9);
    }

    #[test]
    fn preservation_holds_for_any_scaling() {
        let w0 = w(8, 6, 4);
        let cov = random_cov(9, 6);
        for alpha in [0.5, 1.0, 2.0, 16.0] {
            let layer = init_astra(&w0, &cov, 2, alpha).unwrap();
            assert!(layer.merge().max_abs_diff(&w0) < 1e-12);
        }
    }

    #[test]
    fn quantile_windows() {
        assert_eq!(Quantile::Top.columns(8, 2, 0).unwrap(), [0, 1]);
        assert_eq!(Quantile::Q3.columns(8, 2, 0).unwrap(), [1, 2]);
        assert_eq!(Quantile::Median.columns(8, 2, 0).unwrap(), [3, 4]);
        assert_eq!(Quantile::Q1.columns(8, 2, 0).unwrap(), [5, 6]);
        assert_eq!(Quantile::Tail.columns(8, 2, 0).unwrap(), [6, 7]);
        // Wide windows are clipped into range.
        assert_eq!(Quantile::Q1.columns(8, 6, 0).unwrap(), [2, 3, 4, 5, 6, 7]);
        assert_eq!(Quantile::Q3.columns(8, 7, 0).unwrap(), [0, 1, 2, 3, 4, 5, 6]);
        let r1 = Quantile::Random.columns(16, 4, 3).unwrap();
        assert_eq!(r1, Quantile::Random.columns(16, 4, 3).unwrap());
        assert!(r1.windows(2).all(|p| p[0] < p[1]));
        assert!(Quantile::Top.columns(3, 4, 0).is_err());
    }

    #[test]
    fn quantile_top_on_diagonal() {
        let cov = Matrix::diag(&[9.0, 4.0, 1.0]).unwrap();
        let layer = init_quantile(&w(1, 3, 3), &cov, 1, 1.0, Quantile::Top, 0).unwrap();
        assert_eq!(layer.adapter.b, Matrix::column(&[1.0, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn quantile_tail_aliases_astra() {
        let w0 = w(2, 6, 5);
        let cov = random_cov(3, 6);
        let a = init_astra(&w0, &cov, 2, 2.0).unwrap();
        let q = init_quantile(&w0, &cov, 2, 2.0, Quantile::Tail, 0).unwrap();
        assert_eq!(a.adapter, q.adapter);
        assert_eq!(a.w_frozen, q.w_frozen);
    }

    #[test]
    fn degenerate_covariance_warns_but_initializes() {
        let w0 = w(2, 4, 4);
        let cov = Matrix::diag(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let layer = init_astra(&w0, &cov, 2, 2.0).unwrap();
        assert_eq!(layer.warnings.len(), 1);
        assert!(layer.merge().max_abs_diff(&w0) < 1e-12);
    }

    #[test]
    fn errors() {
        let w0 = w(2, 4, 3);
        assert!(matches!(init_vanilla(&w0, 0, 1.0, 0), Err(Error::InvalidRank { .. })));
        assert!(matches!(init_pissa(&w0, 4, 1.0), Err(Error::InvalidRank { .. })));
        let cov = Matrix::identity(3);
        assert!(matches!(init_astra(&w0, &cov, 1, 1.0), Err(Error::DimensionMismatch { .. })));
        assert!(init_vanilla(&w0, 1, 0.0, 0).is_err());
        assert!(InitStrategy::AstraTail.initialize(&w0, None, 1, 1.0, 0).is_err());
        let x = Matrix::zeros(4, 2);
        let layer = init_vanilla(&w0, 1, 1.0, 0).unwrap();
        assert!(matches!(adapted_forward(&layer, &x), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn factored_forward_matches_materialized() {
        let w0 = w(11, 7, 5);
        let cov = random_cov(12, 7);
        let mut layer = init_astra(&w0, &cov, 3, 6.0).unwrap().with_bias(Some(alloc::vec![0.1; 7]));
        layer.adapter.a.add_scaled_in_place(1.0, &w(13, 3, 5)).unwrap();
        let x = w(14, 5, 9);
        let mut materialized = matmul(&layer.merge(), &x).unwrap();
        add_bias(&mut materialized, &[0.1; 7]);
        assert!(adapted_forward(&layer, &x).unwrap().max_abs_diff(&materialized) < 1e-10);
    }

    #[test]
    fn forward_is_linear_in_a() {
        let w0 = w(15, 6, 4);
        let mut layer = init_pissa(&w0, 2, 3.0).unwrap();
        let x = w(16, 4, 3);
        let before = adapted_forward(&layer, &x).unwrap();
        let delta = w(17, 2, 4);
        layer.adapter.a.add_scaled_in_place(1.0, &delta).unwrap();
        let after = adapted_forward(&layer, &x).unwrap();
        let expected = matmul(&matmul(&layer.adapter.b, &delta).unwrap(), &x).unwrap().scale(layer.scaling());
        assert!(after.sub(&before).unwrap().max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn merge_after_training_a_stays_in_span_of_b() {
        let w0 = w(18, 6, 5);
        let cov = random_cov(19, 6);
        let mut layer = init_astra(&w0, &cov, 2, 2.0).unwrap();
        layer.adapter.a.add_scaled_in_place(0.3, &w(20, 2, 5)).unwrap();
        let change = layer.merge().sub(&w0).unwrap();
        let in_span = project(&layer.adapter.b, &change).unwrap();
        assert!(change.sub(&in_span).unwrap().max_abs() < 1e-10);
        assert!(layer.merge().sub(&layer.w_frozen).unwrap().numerical_rank(1e-8).unwrap() <= 2);
    }

    #[test]
    fn strategy_tags_round_trip() {
        let mut all = alloc::vec![InitStrategy::Vanilla, InitStrategy::Pissa, InitStrategy::Milora, InitStrategy::AstraTail];
        all.extend(Quantile::ALL.iter().map(|q| InitStrategy::Quantile(*q)));
        for s in all {
            assert_eq!(alloc::format!("{s}").parse::<InitStrategy>().unwrap(), s);
        }
        assert!("quantile:q2".parse::<InitStrategy>().is_err());
    }

    #[test]
    fn parameter_count() {
        let layer = init_vanilla(&Matrix::zeros(6, 10), 3, 3.0, 0).unwrap();
        assert_eq!(layer.adapter.trainable_parameters(), (10 + 6) * 3);
    }

    #[test]
    fn shared_eigensystem_matches_per_call_decomposition() {
        let w0 = w(3, 6, 5);
        let cov = random_cov(4, 6);
        let es = sym_eigh(&cov).unwrap();
        let mut all = alloc::vec![InitStrategy::Vanilla, InitStrategy::Pissa, InitStrategy::Milora, InitStrategy::AstraTail];
        all.extend(Quantile::ALL.iter().map(|&q| InitStrategy::Quantile(q)));
        for s in all {
            let direct = s.initialize(&w0, Some(&cov), 3, 6.0, 9).unwrap();
            assert_eq!(s.initialize_from_eigen(&w0, Some(&es), 3, 6.0, 9).unwrap(), direct, "{s}");
        }
    }
}
