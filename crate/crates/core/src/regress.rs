//! Regressors from feature vectors to embedded support coordinates: the GP
//! posterior, the kernel smoother (cross-attention) and nearest neighbour.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::kernel::{gram, regularized_factor, Factorization, KernelSpec};
use crate::linalg::Mat;
use crate::scalar::{dot, Scalar};

/// Conditioning set: support features and their embedded coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet<T> {
    features: Mat<T>,
    targets: Mat<T>,
    grid: Option<(usize, usize)>,
}

impl<T: Scalar> SupportSet<T> {
    pub fn new(features: Mat<T>, targets: Mat<T>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(invalid("support set must be non-empty"));
        }
        if features.rows() != targets.rows() {
            return Err(invalid(format!(
                "support has {} features but {} targets",
                features.rows(),
                targets.rows()
            )));
        }
        Ok(Self {
            features,
            targets,
            grid: None,
        })
    }

    /// Records the `(height, width)` grid the support points were taken from.
    pub fn with_grid(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.features.rows() {
            return Err(invalid("support grid shape does not match point count"));
        }
        self.grid = Some((height, width));
        Ok(self)
    }

    pub fn features(&self) -> &Mat<T> {
        &self.features
    }

    pub fn targets(&self) -> &Mat<T> {
        &self.targets
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Posterior mean per query plus the diagonal of the posterior covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior<T> {
    pub mean: Mat<T>,
    pub variance: Vec<T>,
    pub grid: Option<(usize, usize)>,
    /// Jitter actually used by the factorization.
    pub jitter: T,
    /// Set when the least-squares fallback was needed.
    pub least_squares: bool,
}

impl<T: Scalar> GpPosterior<T> {
    /// Attaches the `(height, width)` layout of the query points.
    pub fn with_grid(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.mean.rows() {
            return Err(invalid("query grid shape does not match point count"));
        }
        self.grid = Some((height, width));
        Ok(self)
    }

    pub fn into_output(self) -> RegressorOutput<T> {
        RegressorOutput {
            embedding: self.mean,
            variance: Some(self.variance),
            neighbourhood: None,
            grid: self.grid,
        }
    }
}

/// What a regressor hands the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorOutput<T> {
    pub embedding: Mat<T>,
    pub variance: Option<Vec<T>>,
    /// `k x k` spatial neighbourhood of the variance per query (row-major).
    pub neighbourhood: Option<Mat<T>>,
    pub grid: Option<(usize, usize)>,
}

impl<T: Scalar> RegressorOutput<T> {
    pub fn len(&self) -> usize {
        self.embedding.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embedding.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }
}

fn check_query<T: Scalar>(support: &SupportSet<T>, query: &Mat<T>) -> Result<()> {
    if query.rows() > 0 && query.cols() != support.features.cols() {
        return Err(invalid(format!(
            "query features have dimension {}, support {}",
            query.cols(),
            support.features.cols()
        )));
    }
    Ok(())
}

/// `μ = K_qs (K_ss + jI)⁻¹ E_s`, `σ² = diag(K_qq - K_qs (K_ss + jI)⁻¹ K_sq)`.
///
/// One factorization serves every output dimension. Round-off negatives in
/// the variance are clamped to zero.
pub fn gp_posterior<T: Scalar>(support: &SupportSet<T>, query: &Mat<T>, spec: &KernelSpec<T>, jitter: T) -> Result<GpPosterior<T>> {
    check_query(support, query)?;
    let kss = gram(spec, &support.features, &support.features)?;
    let kqs = gram(spec, query, &support.features)?;
    let factor = regularized_factor(&kss.values, jitter)?;
    let alpha = factor.solve(&support.targets)?;
    let mean = kqs.values.matmul(&alpha)?;

    let kqq: Vec<T> = (0..query.rows())
        .into_par_iter()
        .map(|i| spec.eval_unchecked(query.row(i), query.row(i)))
        .collect();
    let ksq = kqs.values.transpose();
    let explained: Vec<T> = match &factor.factor {
        Factorization::Cholesky(c) => {
            // |L⁻¹ k_sq|² per query
            let v = c.forward_solve(&ksq);
            let vt = v.transpose();
            (0..vt.rows()).map(|i| dot(vt.row(i), vt.row(i))).collect()
        }
        Factorization::LeastSquares(_) => {
            let z = factor.solve(&ksq)?;
            (0..query.rows())
                .map(|i| {
                    let mut s = T::zero();
                    for j in 0..support.len() {
                        s += kqs.values[(i, j)] * z[(j, i)];
                    }
                    s
                })
                .collect()
        }
    };
    let variance = kqq
        .iter()
        .zip(&explained)
        .map(|(&k, &e)| (k - e).max(T::zero()))
        .collect();
    Ok(GpPosterior {
        mean,
        variance,
        grid: None,
        jitter: factor.jitter,
        least_squares: factor.is_least_squares(),
    })
}

/// Stacks each query's mean with the `k x k` neighbourhood of variances
/// around it, replicating edges.
pub fn attach_variance_neighbourhood<T: Scalar>(post: &GpPosterior<T>, k: usize) -> Result<RegressorOutput<T>> {
    let (h, w) = post
        .grid
        .ok_or_else(|| invalid("variance neighbourhood needs a posterior laid out on a grid"))?;
    if k.is_multiple_of(2) {
        return Err(invalid(format!("neighbourhood size must be odd, got {k}")));
    }
    let r = (k / 2) as isize;
    let mut nb = Mat::zeros(h * w, k * k);
    for y in 0..h {
        for x in 0..w {
            let row = nb.row_mut(y * w + x);
            let mut idx = 0;
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    row[idx] = post.variance[yy * w + xx];
                    idx += 1;
                }
            }
        }
    }
    Ok(RegressorOutput {
        embedding: post.mean.clone(),
        variance: Some(post.variance.clone()),
        neighbourhood: Some(nb),
        grid: post.grid,
    })
}

/// Nadaraya–Watson smoother: `Σ k(φ, φ_s) e_s / Σ k(φ, φ_s)`.
pub fn kernel_smoother<T: Scalar>(support: &SupportSet<T>, query: &Mat<T>, spec: &KernelSpec<T>) -> Result<RegressorOutput<T>> {
    check_query(support, query)?;
    let d = support.targets.cols();
    let rows: Vec<Vec<T>> = (0..query.rows())
        .into_par_iter()
        .map(|i| {
            let q = query.row(i);
            let mut weights: Vec<T> = (0..support.len())
                .map(|j| spec.eval_unchecked(q, support.features.row(j)))
                .collect();
            let mut total: T = weights.iter().copied().sum();
            if !(total > T::zero()) || !total.is_finite() {
                // underflow or overflow: redo the weights in the log domain
                let logs: Vec<T> = (0..support.len())
                    .map(|j| spec.log_eval_unchecked(q, support.features.row(j)))
                    .collect();
                let m = logs.iter().copied().fold(T::neg_infinity(), T::max);
                weights = logs.iter().map(|&l| (l - m).exp()).collect();
                total = weights.iter().copied().sum();
            }
            let mut out = vec![T::zero(); d];
            for (j, &wj) in weights.iter().enumerate() {
                for (o, &t) in out.iter_mut().zip(support.targets.row(j)) {
                    *o += wj * t;
                }
            }
            for o in &mut out {
                *o /= total;
            }
            out
        })
        .collect();
    let mut embedding = Mat::zeros(query.rows(), d);
    for (i, r) in rows.into_iter().enumerate() {
        embedding.row_mut(i).copy_from_slice(&r);
    }
    Ok(RegressorOutput {
        embedding,
        variance: None,
        neighbourhood: None,
        grid: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NnMetric {
    Cosine,
    Euclidean,
}

/// Index of the best support feature for every query; ties go to the lowest index.
pub fn nearest_indices<T: Scalar>(support: &SupportSet<T>, query: &Mat<T>, metric: NnMetric) -> Result<Vec<usize>> {
    check_query(support, query)?;
    let snorms: Vec<T> = (0..support.len())
        .map(|j| dot(support.features.row(j), support.features.row(j)).sqrt())
        .collect();
    Ok((0..query.rows())
        .into_par_iter()
        .map(|i| {
            let q = query.row(i);
            let qn = dot(q, q).sqrt();
            let mut best = 0usize;
            let mut best_score = T::neg_infinity();
            for j in 0..support.len() {
                let s = support.features.row(j);
                let score = match metric {
                    NnMetric::Cosine => {
                        let den = qn * snorms[j];
                        if den > T::zero() {
                            dot(q, s) / den
                        } else {
                            T::zero()
                        }
                    }
                    NnMetric::Euclidean => {
                        let mut d2 = T::zero();
                        for (&a, &b) in q.iter().zip(s) {
                            d2 += (a - b) * (a - b);
                        }
                        -d2
                    }
                };
                if score > best_score {
                    best_score = score;
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Piecewise-constant regressor: each query takes the target of its best support feature.
pub fn nearest_neighbour<T: Scalar>(support: &SupportSet<T>, query: &Mat<T>, metric: NnMetric) -> Result<RegressorOutput<T>> {
    let idx = nearest_indices(support, query, metric)?;
    let d = support.targets.cols();
    let mut embedding = Mat::zeros(query.rows(), d);
    for (i, &j) in idx.iter().enumerate() {
        embedding.row_mut(i).copy_from_slice(support.targets.row(j));
    }
    Ok(RegressorOutput {
        embedding,
        variance: None,
        neighbourhood: None,
        grid: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_support() -> SupportSet<f64> {
        let f = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let t = Mat::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, -0.6]]).unwrap();
        SupportSet::new(f, t).unwrap()
    }

    #[test]
    fn empty_support_rejected() {
        assert!(SupportSet::<f64>::new(Mat::zeros(0, 2), Mat::zeros(0, 2)).is_err());
        assert!(SupportSet::<f64>::new(Mat::zeros(2, 2), Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn single_point_smoother_returns_its_target() {
        let s = SupportSet::new(Mat::<f64>::from_rows(&[vec![0.3, 0.9]]).unwrap(), Mat::from_rows(&[vec![0.7, -0.2]]).unwrap()).unwrap();
        let q = Mat::from_rows(&[vec![1.0, 0.0], vec![-2.0, 5.0]]).unwrap();
        let spec = KernelSpec::exp_cos_sim(0.2, 1e-6).unwrap();
        let out = kernel_smoother(&s, &q, &spec).unwrap();
        for i in 0..2 {
            assert!((out.embedding[(i, 0)] - 0.7).abs() < 1e-15);
            assert!((out.embedding[(i, 1)] + 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn equidistant_query_averages() {
        let s = toy_support();
        let spec = KernelSpec::squared_exponential(1.0).unwrap();
        let sub = SupportSet::new(
            Mat::from_rows(&[s.features().row(0).to_vec(), s.features().row(1).to_vec()]).unwrap(),
            Mat::from_rows(&[s.targets().row(0).to_vec(), s.targets().row(1).to_vec()]).unwrap(),
        )
        .unwrap();
        let q = Mat::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let out = kernel_smoother(&sub, &q, &spec).unwrap();
        assert!((out.embedding[(0, 0)] - (-0.1)).abs() < 1e-15);
        assert!((out.embedding[(0, 1)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn smoother_survives_underflow() {
        let s = SupportSet::new(Mat::<f64>::from_rows(&[vec![0.0], vec![0.1]]).unwrap(), Mat::from_rows(&[vec![1.0], vec![2.0]]).unwrap()).unwrap();
        let spec = KernelSpec::squared_exponential(0.01).unwrap();
        let out = kernel_smoother(&s, &Mat::from_rows(&[vec![50.0]]).unwrap(), &spec).unwrap();
        assert!((out.embedding[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nn_exact_hit_and_ties() {
        let s = toy_support();
        let out = nearest_neighbour(&s, &Mat::from_rows(&[vec![0.0, 1.0]]).unwrap(), NnMetric::Euclidean).unwrap();
        assert_eq!(out.embedding.row(0), s.targets().row(1));
        // (0.5, 0.5) is equidistant from supports 0 and 1
        let idx = nearest_indices(&s, &Mat::from_rows(&[vec![0.5, 0.5]]).unwrap(), NnMetric::Euclidean).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn neighbourhood_k1_and_errors() {
        let post = GpPosterior {
            mean: Mat::zeros(4, 2),
            variance: vec![1.0, 2.0, 3.0, 4.0],
            grid: None,
            jitter: 0.0,
            least_squares: false,
        };
        assert!(attach_variance_neighbourhood(&post, 1).is_err());
        let post = post.with_grid(2, 2).unwrap();
        assert!(attach_variance_neighbourhood(&post, 2).is_err());
        let out = attach_variance_neighbourhood(&post, 1).unwrap();
        assert_eq!(out.neighbourhood.unwrap().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn neighbourhood_center_sees_whole_3x3() {
        let post = GpPosterior {
            mean: Mat::zeros(9, 1),
            variance: (1..=9).map(f64::from).collect(),
            grid: Some((3, 3)),
            jitter: 0.0,
            least_squares: false,
        };
        let out = attach_variance_neighbourhood(&post, 3).unwrap();
        let nb = out.neighbourhood.unwrap();
        assert_eq!(nb.row(4), post.variance.as_slice());
        // corner replicates its edge
        assert_eq!(nb.row(0), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 4.0, 4.0, 5.0]);
    }
}
