//! RBF kernels and maximum mean discrepancy.
//!
//! Bandwidths are squared length scales: `k(x, y) = exp(−‖x − y‖² / (2·bw))`.
//! The biased estimator
//!
//! ```text
//! MMD²(X, Y) = Σ_k w_k · [ mean K_k(X, X) + mean K_k(Y, Y) − 2·mean K_k(X, Y) ]
//! ```
//!
//! is the squared RKHS distance between the empirical mean embeddings and is
//! what the training loss minimizes. The unbiased U-statistic drops the
//! diagonal terms and is offered for reporting.

use crate::error::{Error, Result};
use crate::numcore::{squared_euclidean, Matrix, Tape, Var};

/// Bandwidth multipliers applied to the median heuristic.
pub const DEFAULT_BANDWIDTH_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bandwidths with {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if let Some(b) = bandwidths.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth {b}")));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
            || weights.iter().all(|w| *w == 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "kernel weights {weights:?}"
            )));
        }
        Ok(Self {
            bandwidths,
            weights,
        })
    }

    pub fn single(bandwidth: f64) -> Result<Self> {
        Self::new(vec![bandwidth], vec![1.0])
    }

    /// Equal weights summing to one.
    pub fn uniform(bandwidths: Vec<f64>) -> Result<Self> {
        let w = 1.0 / bandwidths.len().max(1) as f64;
        let weights = vec![w; bandwidths.len()];
        Self::new(bandwidths, weights)
    }

    /// `base × scale` for each scale, uniformly weighted.
    pub fn multiscale(base: f64, scales: &[f64]) -> Result<Self> {
        Self::uniform(scales.iter().map(|s| base * s).collect())
    }

    /// Multiscale spec around the median heuristic of the pooled sample.
    pub fn from_median_heuristic(x: &Matrix, y: &Matrix, scales: &[f64]) -> Result<Self> {
        Self::multiscale(median_heuristic(x, y)?, scales)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn terms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.bandwidths
            .iter()
            .copied()
            .zip(self.weights.iter().copied())
    }
}

/// MMD adaptation layers with one kernel spec per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationConfig {
    layers: Vec<usize>,
    kernels: Vec<KernelSpec>,
}

impl AdaptationConfig {
    pub fn new(layers: Vec<usize>, kernels: Vec<KernelSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("no adaptation layers".into()));
        }
        if layers.len() != kernels.len() {
            return Err(Error::dim(
                "adaptation kernels",
                layers.len(),
                kernels.len(),
            ));
        }
        Ok(Self { layers, kernels })
    }

    /// Median-heuristic kernels for each listed layer of the given activations.
    pub fn from_activations(
        layers: &[usize],
        acts_s: &[Matrix],
        acts_t: &[Matrix],
        scales: &[f64],
    ) -> Result<Self> {
        let kernels = layers
            .iter()
            .map(|&l| {
                let (s, t) = layer_pair(acts_s, acts_t, l)?;
                KernelSpec::from_median_heuristic(s, t, scales)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers.to_vec(), kernels)
    }

    /// Checks that every layer index is valid for a trunk with `n_layers` layers.
    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        match self.layers.iter().find(|&&l| l >= n_layers) {
            Some(&l) => Err(Error::MissingLayer(l)),
            None => Ok(()),
        }
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn kernels(&self) -> &[KernelSpec] {
        &self.kernels
    }
}

fn layer_pair<'a>(s: &'a [Matrix], t: &'a [Matrix], l: usize) -> Result<(&'a Matrix, &'a Matrix)> {
    match (s.get(l), t.get(l)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::MissingLayer(l)),
    }
}

fn check_pair(x: &Matrix, y: &Matrix, min_rows: usize) -> Result<()> {
    if x.rows() < min_rows || y.rows() < min_rows {
        return Err(Error::Empty(format!(
            "MMD needs at least {min_rows} rows per set, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::dim("kernel feature dim", x.cols(), y.cols()));
    }
    Ok(())
}

pub fn squared_distances(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return Err(Error::dim("kernel feature dim", x.cols(), y.cols()));
    }
    Ok(Matrix::from_fn(x.rows(), y.rows(), |i, j| {
        squared_euclidean(x.row(i), y.row(j))
    }))
}

pub fn rbf_kernel_matrix(x: &Matrix, y: &Matrix, bandwidth: f64) -> Result<Matrix> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth {bandwidth}")));
    }
    Ok(squared_distances(x, y)?.map(|d| (-d / (2.0 * bandwidth)).exp()))
}

/// Median of the pairwise squared distances (`i < j`) of the stacked sample.
/// An even pair count averages the two middle values.
pub fn median_heuristic(x: &Matrix, y: &Matrix) -> Result<f64> {
    let pooled = x.vstack(y)?;
    let n = pooled.rows();
    if n < 2 {
        return Err(Error::Empty(
            "median heuristic needs at least 2 points".into(),
        ));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(squared_euclidean(pooled.row(i), pooled.row(j)));
        }
    }
    let m = d.len();
    let upper = m / 2;
    let (_, hi, _) = d.select_nth_unstable_by(upper, f64::total_cmp);
    let hi = *hi;
    let median = if m % 2 == 1 {
        hi
    } else {
        let lo = d[..upper].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if median <= 0.0 {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(median)
}

/// Kernel-sum means `(mean K_XX, mean K_YY, mean K_XY)` for one bandwidth,
/// with or without the diagonal of the within-set sums.
fn kernel_means(
    dxx: &Matrix,
    dyy: &Matrix,
    dxy: &Matrix,
    bw: f64,
    diagonal: bool,
) -> (f64, f64, f64) {
    let k = |d: f64| (-d / (2.0 * bw)).exp();
    let within = |d: &Matrix| {
        let n = d.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if diagonal || i != j {
                    s += k(d.get(i, j));
                }
            }
        }
        let count = if diagonal { n * n } else { n * (n - 1) };
        s / count as f64
    };
    let cross = dxy.data().iter().map(|&d| k(d)).sum::<f64>() / dxy.len() as f64;
    (within(dxx), within(dyy), cross)
}

fn mmd2_raw(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> Result<f64> {
    let dxx = squared_distances(x, x)?;
    let dyy = squared_distances(y, y)?;
    let dxy = squared_distances(x, y)?;
    Ok(spec
        .terms()
        .map(|(bw, w)| {
            let (kxx, kyy, kxy) = kernel_means(&dxx, &dyy, &dxy, bw, true);
            w * (kxx + kyy - 2.0 * kxy)
        })
        .sum())
}

/// Biased multi-kernel MMD², clamped at zero.
pub fn mmd2_biased(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> Result<f64> {
    check_pair(x, y, 1)?;
    Ok(mmd2_raw(x, y, spec)?.max(0.0))
}

/// Unbiased multi-kernel MMD² (within-set diagonals excluded). May be negative.
pub fn mmd2_unbiased(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> Result<f64> {
    check_pair(x, y, 2)?;
    let dxx = squared_distances(x, x)?;
    let dyy = squared_distances(y, y)?;
    let dxy = squared_distances(x, y)?;
    Ok(spec
        .terms()
        .map(|(bw, w)| {
            let (kxx, kyy, kxy) = kernel_means(&dxx, &dyy, &dxy, bw, false);
            w * (kxx + kyy - 2.0 * kxy)
        })
        .sum())
}

/// Sum of per-layer biased MMD² over the configured adaptation layers.
pub fn mmd2_multilayer(
    acts_s: &[Matrix],
    acts_t: &[Matrix],
    cfg: &AdaptationConfig,
) -> Result<f64> {
    cfg.layers
        .iter()
        .zip(&cfg.kernels)
        .map(|(&l, spec)| {
            let (s, t) = layer_pair(acts_s, acts_t, l)?;
            mmd2_biased(s, t, spec)
        })
        .sum()
}

/// Tape-recorded biased MMD² (unclamped) with gradients to both sets.
pub fn mmd2_biased_var(tape: &mut Tape, x: Var, y: Var, spec: &KernelSpec) -> Result<Var> {
    let (xm, ym) = (tape.value(x), tape.value(y));
    check_pair(xm, ym, 1)?;
    let value = mmd2_raw(xm, ym, spec)?;
    let spec = spec.clone();
    Ok(tape.record(
        &[x, y],
        Matrix::scalar(value),
        Box::new(move |inp: &[&Matrix], _: &Matrix, g: &Matrix| {
            let (gx, gy) = mmd2_grad(inp[0], inp[1], &spec);
            let s = g.get(0, 0);
            vec![gx.map(|v| v * s), gy.map(|v| v * s)]
        }),
    ))
}

/// Gradient of the biased estimator with respect to every row of `x` and `y`.
///
/// With `∂k(a, b)/∂a = −k(a, b)·(a − b)/bw`:
///
/// ```text
/// ∂/∂xᵢ = Σ_k w_k [ (2/m²) Σⱼ ∂k(xᵢ,xⱼ)/∂xᵢ − (2/(m·n)) Σⱼ ∂k(xᵢ,yⱼ)/∂xᵢ ]
/// ```
///
/// and symmetrically for `y`.
fn mmd2_grad(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> (Matrix, Matrix) {
    let (m, n, d) = (x.rows(), y.rows(), x.cols());
    let mut gx = Matrix::zeros(m, d);
    let mut gy = Matrix::zeros(n, d);
    // within-set sums are symmetric, so each ordered pair counts twice for its first endpoint
    pair_grad(x, x, 2.0 / (m * m) as f64, spec, &mut gx, None);
    pair_grad(y, y, 2.0 / (n * n) as f64, spec, &mut gy, None);
    pair_grad(x, y, -2.0 / (m * n) as f64, spec, &mut gx, Some(&mut gy));
    (gx, gy)
}

/// Accumulates the gradient of `scale · Σᵢⱼ Σ_k w_k k(aᵢ, bⱼ)` into `out_a`
/// (and into `out_b` when given).
fn pair_grad(
    a: &Matrix,
    b: &Matrix,
    scale: f64,
    spec: &KernelSpec,
    out_a: &mut Matrix,
    mut out_b: Option<&mut Matrix>,
) {
    let d = a.cols();
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let (ra, rb) = (a.row(i), b.row(j));
            let dist = squared_euclidean(ra, rb);
            let c = -scale
                * spec
                    .terms()
                    .map(|(bw, w)| w * (-dist / (2.0 * bw)).exp() / bw)
                    .sum::<f64>();
            if c == 0.0 {
                continue;
            }
            for k in 0..d {
                let diff = ra[k] - rb[k];
                out_a.set(i, k, out_a.get(i, k) + c * diff);
                if let Some(ob) = out_b.as_deref_mut() {
                    ob.set(j, k, ob.get(j, k) - c * diff);
                }
            }
        }
    }
}

/// Sum of tape-recorded per-layer MMD² terms.
pub fn mmd2_multilayer_var(
    tape: &mut Tape,
    acts_s: &[Var],
    acts_t: &[Var],
    cfg: &AdaptationConfig,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&l, spec) in cfg.layers.iter().zip(&cfg.kernels) {
        let (s, t) = match (acts_s.get(l), acts_t.get(l)) {
            (Some(&s), Some(&t)) => (s, t),
            _ => return Err(Error::MissingLayer(l)),
        };
        let term = mmd2_biased_var(tape, s, t, spec)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no adaptation layers".into()))
}
