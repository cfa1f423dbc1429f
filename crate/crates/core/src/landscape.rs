//! Critical-point analysis: locating critical points, Hessian inertia under
//! embeddings, strict-saddle constructions, the truly-bad screen and the
//! degrees-of-freedom count of compatible embeddings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{
    affine_extract, alpha_system, global_threefold, sample_beta, threefold_copy_index,
    EffectiveBiases, EmbeddingError, EmbeddingSpec, IndexMapping, NullBias,
};
use crate::network::{
    EmpiricalRisk, HessianOptions, HessianReport, NetShape, NetworkError, ParamTuple,
};
use crate::numerics::{
    dot, inertia_of, least_squares_solve, max_abs, numeric_rank, seeded_rng, sym_eigen,
    DenseMatrix, Inertia, NumericsError,
};

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("gradient descent diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, LandscapeError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentOptions {
    pub lr: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Record a trace point every this many iterations (0 disables the trace).
    pub trace_every: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            lr: 0.05,
            max_iters: 20_000,
            grad_tol: 1e-8,
            trace_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub risk: f64,
    pub grad_inf_norm: f64,
}

#[derive(Clone, Debug)]
pub struct DescentResult {
    pub params: ParamTuple,
    pub risk: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
}

/// Full-batch gradient descent with a fixed step size.
pub fn gradient_descent(
    risk: &EmpiricalRisk,
    init: ParamTuple,
    opts: &DescentOptions,
) -> Result<DescentResult> {
    let shape = init.shape().clone();
    let mut v = init.to_vector();
    let mut trace = Vec::new();
    let mut iteration = 0;
    loop {
        let theta = ParamTuple::from_vector(&shape, &v)?;
        let (r, g) = risk.risk_and_gradient(&theta)?;
        if !r.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(LandscapeError::Diverged { iteration });
        }
        let gn = max_abs(&g);
        let done = gn <= opts.grad_tol || iteration >= opts.max_iters;
        if opts.trace_every > 0 && (iteration % opts.trace_every == 0 || done) {
            trace.push(TracePoint {
                iteration,
                risk: r,
                grad_inf_norm: gn,
            });
        }
        if done {
            return Ok(DescentResult {
                params: theta,
                risk: r,
                grad_inf_norm: gn,
                iterations: iteration,
                converged: gn <= opts.grad_tol,
                trace,
            });
        }
        for (p, d) in v.iter_mut().zip(&g) {
            *p -= opts.lr * d;
        }
        iteration += 1;
    }
}

/// Damped Newton steps on the gradient, accepting a step only when it lowers
/// `‖∇R‖_∞`. Uses the minimum-norm solution so degenerate critical
/// manifolds are approached orthogonally.
pub fn newton_polish(
    risk: &EmpiricalRisk,
    init: ParamTuple,
    grad_tol: f64,
    max_steps: usize,
) -> Result<DescentResult> {
    let shape = init.shape().clone();
    let mut theta = init;
    let (mut r, mut g) = risk.risk_and_gradient(&theta)?;
    let mut gn = max_abs(&g);
    let mut steps = 0;
    while gn > grad_tol && steps < max_steps {
        steps += 1;
        let h = risk.hessian_matrix(&theta, crate::network::HessianMode::AnalyticH1Fd, 1e-4)?;
        let scale = 1.0 + h.max_abs();
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let base = theta.to_vector();
        let mut improved = false;
        for damping in [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1.0] {
            let mut m = h.clone();
            let n = m.rows();
            for k in 0..n {
                m.as_mut_slice()[k * n + k] += damping * scale;
            }
            let delta = least_squares_solve(&m, &neg)?.solution;
            let cand: Vec<f64> = base.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let cand = ParamTuple::from_vector(&shape, &cand)?;
            let (cr, cg) = risk.risk_and_gradient(&cand)?;
            let cn = max_abs(&cg);
            if cr.is_finite() && cn < gn {
                theta = cand;
                r = cr;
                g = cg;
                gn = cn;
                improved = true;
                break;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(DescentResult {
        params: theta,
        risk: r,
        grad_inf_norm: gn,
        iterations: steps,
        converged: gn <= grad_tol,
        trace: Vec::new(),
    })
}

/// Levenberg–Marquardt on the Gauss–Newton matrix: solve
/// `(H⁽¹⁾ + μ I) δ = −∇R`, shrink `μ` after a step that lowers the risk and
/// grow it otherwise. Meant for small networks, where forming `H⁽¹⁾` is cheap.
/// The trace holds every iteration.
pub fn levenberg_marquardt(
    risk: &EmpiricalRisk,
    init: ParamTuple,
    grad_tol: f64,
    max_iters: usize,
) -> Result<DescentResult> {
    let shape = init.shape().clone();
    let mut theta = init;
    let (mut r, mut g) = risk.risk_and_gradient(&theta)?;
    let mut gn = max_abs(&g);
    let mut mu = 1e-3;
    let mut iteration = 0;
    let mut trace = vec![TracePoint {
        iteration,
        risk: r,
        grad_inf_norm: gn,
    }];
    while gn > grad_tol && iteration < max_iters && mu < 1e12 {
        iteration += 1;
        let h1 = risk.gauss_newton(&theta)?;
        let n = h1.rows();
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let base = theta.to_vector();
        loop {
            let mut m = h1.clone();
            for k in 0..n {
                m[(k, k)] += mu;
            }
            let delta = least_squares_solve(&m, &neg)?.solution;
            let cand: Vec<f64> = base.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let cand = ParamTuple::from_vector(&shape, &cand)?;
            let (cr, cg) = risk.risk_and_gradient(&cand)?;
            if cr.is_finite() && cr <= r {
                theta = cand;
                r = cr;
                g = cg;
                gn = max_abs(&g);
                mu = f64::max(mu / 3.0, 1e-12);
                break;
            }
            mu *= 4.0;
            if mu >= 1e12 {
                break;
            }
        }
        trace.push(TracePoint {
            iteration,
            risk: r,
            grad_inf_norm: gn,
        });
    }
    Ok(DescentResult {
        params: theta,
        risk: r,
        grad_inf_norm: gn,
        iterations: iteration,
        converged: gn <= grad_tol,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    StrictSaddle,
    PsdDegenerate,
    PsdNondegenerate,
    /// No eigenvalue below `−τ`, but some clearly below zero.
    IndefiniteNonstrictThreshold,
}

/// Zero tolerance `τ = max(1e-6, 10 · ‖∇R‖_∞)`.
pub fn zero_tolerance(grad_inf_norm: f64) -> f64 {
    f64::max(1e-6, 10.0 * grad_inf_norm)
}

pub fn classify(eigenvalues: &[f64], tau: f64) -> Classification {
    let inertia = inertia_of(eigenvalues, tau);
    let min = eigenvalues.first().copied().unwrap_or(0.0);
    if inertia.n_neg > 0 {
        Classification::StrictSaddle
    } else if min < -0.1 * tau {
        Classification::IndefiniteNonstrictThreshold
    } else if inertia.n_zero > 0 {
        Classification::PsdDegenerate
    } else {
        Classification::PsdNondegenerate
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalPointRecord {
    pub params: ParamTuple,
    pub gradient_inf_norm: f64,
    pub risk: f64,
    pub zero_tol: f64,
    pub hessian: HessianReport,
    pub classification: Classification,
}

impl CriticalPointRecord {
    pub fn inertia(&self) -> Inertia {
        self.hessian.inertia
    }
}

/// Hessian, inertia and classification of `θ` at `τ` from its gradient residual.
pub fn analyze_point(risk: &EmpiricalRisk, theta: &ParamTuple) -> Result<CriticalPointRecord> {
    let (r, g) = risk.risk_and_gradient(theta)?;
    let gn = max_abs(&g);
    let tau = zero_tolerance(gn);
    let hessian = risk.hessian(
        theta,
        HessianOptions {
            zero_tol: tau,
            ..Default::default()
        },
    )?;
    let classification = classify(&hessian.eigenvalues, tau);
    Ok(CriticalPointRecord {
        params: theta.clone(),
        gradient_inf_norm: gn,
        risk: r,
        zero_tol: tau,
        hessian,
        classification,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalSearch {
    pub seed: u64,
    pub init_scale: f64,
    pub descent: DescentOptions,
    /// Newton polishing steps after descent (0 = plain descent).
    pub polish_steps: usize,
}

impl Default for CriticalSearch {
    fn default() -> Self {
        CriticalSearch {
            seed: 0,
            init_scale: 1.0,
            descent: DescentOptions::default(),
            polish_steps: 30,
        }
    }
}

/// Gradient descent from a seeded normal initialization, optionally
/// followed by Newton polishing, then Hessian analysis. The record carries
/// the achieved gradient norm; acceptance is left to the caller.
pub fn find_critical(
    shape: &NetShape,
    risk: &EmpiricalRisk,
    search: &CriticalSearch,
) -> Result<CriticalPointRecord> {
    let mut rng = seeded_rng(search.seed);
    let init = ParamTuple::random_normal(shape, search.init_scale, &mut rng);
    let mut res = gradient_descent(risk, init, &search.descent)?;
    if search.polish_steps > 0 && !res.converged {
        res = newton_polish(
            risk,
            res.params,
            search.descent.grad_tol,
            search.polish_steps,
        )?;
    }
    analyze_point(risk, &res.params)
}

#[derive(Clone, Debug, Serialize)]
pub struct InertiaComparison {
    pub narrow: Inertia,
    pub wide: Inertia,
    pub zero_tol: f64,
    pub monotone: bool,
}

/// Inertias of `H(θ)` and `H(𝔗(θ))` at a shared zero tolerance.
pub fn inertia_compare(
    risk: &EmpiricalRisk,
    record: &CriticalPointRecord,
    embedding: &EmbeddingSpec,
) -> Result<InertiaComparison> {
    let wide = embedding.apply(&record.params)?;
    let tau = record.zero_tol;
    let hw = risk.hessian(
        &wide,
        HessianOptions {
            zero_tol: tau,
            ..Default::default()
        },
    )?;
    let narrow = record.hessian.inertia_at(tau);
    let wide = hw.inertia;
    let monotone =
        wide.n_neg >= narrow.n_neg && wide.n_zero >= narrow.n_zero && wide.n_pos >= narrow.n_pos;
    Ok(InertiaComparison {
        narrow,
        wide,
        zero_tol: tau,
        monotone,
    })
}

/// `‖Aᵀ H(Aθ + c) A − H(θ)‖_max` for an affine embedding.
pub fn pullback_identity_check<F>(risk: &EmpiricalRisk, theta: &ParamTuple, embed: F) -> Result<f64>
where
    F: Fn(&ParamTuple) -> std::result::Result<ParamTuple, EmbeddingError>,
{
    let map = affine_extract(&embed, theta.shape(), 0)?;
    let wide = embed(theta)?;
    let opts = HessianOptions::default();
    let hw = risk.hessian_matrix(&wide, opts.mode, opts.step)?;
    let hn = risk.hessian_matrix(theta, opts.mode, opts.step)?;
    let pulled = map.a.transpose().matmul(&hw.matmul(&map.a)?)?;
    Ok(pulled.sub(&hn)?.max_abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaddleCase {
    /// Positive eigenvalue of `H⁽²⁾` on `θ^{[L−1]}`; direction `[½v, ½v, v]`.
    PositiveUpper,
    /// Negative eigenvalue of `H⁽²⁾` on `θ^{[L−1]}`; direction `[v, −v, 0]`.
    NegativeUpper,
    /// `H⁽²⁾` vanishes on `θ^{[L−1]}` but not on its coupling to `W^[L]`.
    ZeroTraceBlock,
    /// `H⁽²⁾ ≈ 0`: no direction available.
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct SaddleConstruction {
    pub case: SaddleCase,
    /// Eigenvalue of the narrow block the direction was built from.
    pub lambda: f64,
    /// `−λ/2` or `2λ`.
    pub predicted: f64,
    /// `uᵀ H u` at the wide point, by Hessian-vector differences.
    pub achieved: f64,
    pub wide_min_eigenvalue: f64,
    pub wide_params: ParamTuple,
    pub direction: Vec<f64>,
}

impl SaddleConstruction {
    /// `|achieved − predicted| ≤ 0.1 |predicted| + 1e-6`.
    pub fn matches_prediction(&self) -> bool {
        (self.achieved - self.predicted).abs() <= 0.1 * self.predicted.abs() + 1e-6
    }
}

/// Builds the three-fold embedding of a critical point together with a
/// direction of negative curvature derived from `H⁽²⁾`. `h2_tol` decides
/// when a block counts as zero.
pub fn strict_saddle_construct(
    risk: &EmpiricalRisk,
    record: &CriticalPointRecord,
    h2_tol: f64,
) -> Result<SaddleConstruction> {
    let theta = &record.params;
    let narrow = theta.shape();
    let wide = global_threefold(theta);
    let upper = narrow.upper_param_count();
    let rep = &record.hessian;
    let mut case = SaddleCase::Inconclusive;
    let mut lambda = 0.0;
    let mut predicted = 0.0;
    let mut direction = vec![0.0; wide.shape().param_count()];

    let put = |u: &mut Vec<f64>, p: usize, c: usize, value: f64| {
        if let Some(q) = threefold_copy_index(narrow, p, c) {
            u[q] = value;
        }
    };

    if rep.h2_upper.max_abs() > h2_tol {
        let eig = sym_eigen(&rep.h2_upper, 1e-12)?;
        let lo = eig.values[0];
        let hi = *eig.values.last().unwrap();
        let (pa, pb) = (-hi / 2.0, 2.0 * lo);
        if hi > h2_tol && (pa <= pb || lo >= -h2_tol) {
            let v = eig.vector(eig.values.len() - 1);
            for p in 0..upper {
                put(&mut direction, p, 0, 0.5 * v[p]);
                put(&mut direction, p, 1, 0.5 * v[p]);
                put(&mut direction, p, 2, v[p]);
            }
            case = SaddleCase::PositiveUpper;
            lambda = hi;
            predicted = pa;
        } else if lo < -h2_tol {
            let v = eig.vector(0);
            for p in 0..upper {
                put(&mut direction, p, 0, v[p]);
                put(&mut direction, p, 1, -v[p]);
            }
            case = SaddleCase::NegativeUpper;
            lambda = lo;
            predicted = pb;
        }
    } else {
        // θ^{[L−1]} together with the W^[L] block
        let last_w = narrow.layer_offset(narrow.depth())
            ..narrow.layer_offset(narrow.depth())
                + narrow.output_dim() * narrow.width(narrow.depth() - 1);
        let idx: Vec<usize> = (0..upper).chain(last_w).collect();
        let block = rep.h2.principal_submatrix(&idx);
        if block.max_abs() > h2_tol {
            let eig = sym_eigen(&block, 1e-12)?;
            if eig.values[0] < -h2_tol {
                let v = eig.vector(0);
                for (k, &p) in idx.iter().enumerate() {
                    put(&mut direction, p, 0, v[k]);
                    put(&mut direction, p, 1, -v[k]);
                }
                case = SaddleCase::ZeroTraceBlock;
                lambda = eig.values[0];
                predicted = 2.0 * lambda;
            }
        }
    }

    let achieved = if case == SaddleCase::Inconclusive {
        0.0
    } else {
        risk.quadratic_form(&wide, &direction)?
    };
    let hw = risk.hessian(
        &wide,
        HessianOptions {
            zero_tol: record.zero_tol,
            ..Default::default()
        },
    )?;
    Ok(SaddleConstruction {
        case,
        lambda,
        predicted,
        achieved,
        wide_min_eigenvalue: hw.min_eigenvalue(),
        wide_params: wide,
        direction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScreenVerdict {
    /// `H⁽²⁾ ≈ 0` and `H ⪰ 0`: may be truly bad.
    Candidate,
    /// `H ⪰ 0` but `H⁽²⁾ ≠ 0`: an embedding exposes a strict saddle.
    NotCandidate,
    AlreadyStrictSaddle,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScreenReport {
    pub verdict: ScreenVerdict,
    pub candidate: bool,
    pub h2_max: f64,
    pub min_eigenvalue: f64,
    pub zero_tol: f64,
    pub evidence: Option<SaddleConstruction>,
}

/// Applies the necessary condition `H⁽²⁾ = 0` for truly-bad critical points.
pub fn truly_bad_screen(
    risk: &EmpiricalRisk,
    record: &CriticalPointRecord,
    h2_tol: f64,
) -> Result<ScreenReport> {
    let rep = &record.hessian;
    let tau = record.zero_tol;
    let h2_max = rep.h2.max_abs();
    let min_eigenvalue = rep.min_eigenvalue();
    let base = ScreenReport {
        verdict: ScreenVerdict::AlreadyStrictSaddle,
        candidate: false,
        h2_max,
        min_eigenvalue,
        zero_tol: tau,
        evidence: None,
    };
    if min_eigenvalue < -tau {
        return Ok(base);
    }
    if h2_max <= h2_tol {
        return Ok(ScreenReport {
            verdict: ScreenVerdict::Candidate,
            candidate: true,
            ..base
        });
    }
    let evidence = strict_saddle_construct(risk, record, h2_tol)?;
    Ok(ScreenReport {
        verdict: ScreenVerdict::NotCandidate,
        evidence: Some(evidence),
        ..base
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DofSample {
    pub seed: u64,
    pub beta_freedom: usize,
    pub alpha_nullity: Vec<usize>,
    pub total: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DofReport {
    pub k: usize,
    /// `K_l` for `l ∈ [0, L]`.
    pub k_per_layer: Vec<usize>,
    pub m_null: usize,
    /// `K + Σ_l K_l K_{l−1}`.
    pub formula: usize,
    pub expected_alpha_nullity: Vec<usize>,
    pub expected_beta_freedom: usize,
    pub b_star_freedom: usize,
    pub samples: Vec<DofSample>,
    pub all_match: bool,
}

/// Measures the degrees of freedom of compatible `α` for `𝕀` at generic `β`.
pub fn dof_verify(
    map: &IndexMapping,
    sigma: crate::network::Activation,
    seeds: &[u64],
) -> Result<DofReport> {
    let wide = map.wide_shape();
    let narrow = map.narrow_shape();
    let depth = wide.depth();
    let kl = map.added();
    let k: usize = kl.iter().sum();
    let m_null = map.null_count();
    let expected_alpha_nullity: Vec<usize> = (1..=depth).map(|l| kl[l] * kl[l - 1]).collect();
    let formula = k + expected_alpha_nullity.iter().sum::<usize>();

    // group-sum constraints on β over effective hidden neurons
    let effective: Vec<(usize, usize)> = (1..depth)
        .flat_map(|l| {
            (0..wide.width(l))
                .filter(move |&i| !map.is_null(l, i))
                .map(move |i| (l, i))
        })
        .collect();
    let groups: Vec<(usize, usize)> = (1..depth)
        .flat_map(|l| (1..=narrow.width(l)).map(move |s| (l, s)))
        .collect();
    let mut g = DenseMatrix::zeros(groups.len(), effective.len());
    for (r, &(l, s)) in groups.iter().enumerate() {
        for (c, &(le, i)) in effective.iter().enumerate() {
            if le == l && map.target(l, i) == s {
                g.as_mut_slice()[r * effective.len() + c] = 1.0;
            }
        }
    }
    let beta_freedom = effective.len() - numeric_rank(&g, 1e-10);

    let mut samples = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = seeded_rng(seed);
        let beta = sample_beta(map, &mut rng);
        let mut b_star = EffectiveBiases::default();
        for l in 1..depth {
            for i in map.nulls(l) {
                use rand::Rng;
                b_star.entries.push(NullBias {
                    l,
                    i: i + 1,
                    value: rng.random_range(-1.0..1.0),
                });
            }
        }
        let mut alpha_nullity = Vec::with_capacity(depth);
        for l in 1..=depth {
            let (a, _) = alpha_system(map, &beta, &b_star, sigma, l)?;
            alpha_nullity.push(a.cols() - numeric_rank(&a, 1e-10));
        }
        let total = beta_freedom + alpha_nullity.iter().sum::<usize>() + m_null;
        samples.push(DofSample {
            seed,
            beta_freedom,
            alpha_nullity,
            total,
        });
    }
    let all_match = samples.iter().all(|s| s.total == formula);
    Ok(DofReport {
        k,
        k_per_layer: kl,
        m_null,
        formula,
        expected_alpha_nullity,
        expected_beta_freedom: k - m_null,
        b_star_freedom: m_null,
        samples,
        all_match,
    })
}

/// Quadratic form of a dense symmetric matrix restricted to the given
/// coordinates; helper for checking copy-index directions.
pub fn restricted_quadratic_form(h: &DenseMatrix, u: &[f64]) -> f64 {
    let hu = h.matvec(u).expect("matching dimension");
    dot(u, &hu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{null_embed, split_embed, EmbeddingStep, GeneralEmbedding};
    use crate::network::{forward, Activation, Dataset, Mse, ScaledLoss};
    use crate::testutil::{dataset_a, theta_a};

    fn three_points() -> Dataset {
        Dataset::new(
            vec![vec![-1.0], vec![0.0], vec![1.0]],
            vec![vec![0.0], vec![1.0], vec![0.0]],
        )
        .unwrap()
    }

    // Constant output 1/3 with W¹ = 0: critical because the data are
    // symmetric, with nonzero residual and a positive H⁽²⁾ entry on W¹.
    fn flat_critical_111() -> CriticalPointRecord {
        let data = three_points();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let shape = NetShape::new(vec![1, 1, 1]).unwrap();
        let th =
            ParamTuple::from_vector(&shape, &[0.0, 0.5, -1.0, 1.0 / 3.0 + 0.5f64.tanh()]).unwrap();
        analyze_point(&r, &th).unwrap()
    }

    #[test]
    fn zero_step_leaves_parameters() {
        let data = dataset_a();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let g0 = max_abs(&r.gradient(&theta_a()).unwrap());
        let opts = DescentOptions {
            lr: 0.0,
            max_iters: 10,
            grad_tol: 1e-8,
            trace_every: 1,
        };
        let res = gradient_descent(&r, theta_a(), &opts).unwrap();
        assert_eq!(res.params, theta_a());
        assert_eq!(res.grad_inf_norm, g0);
        assert_eq!(res.trace.len(), 11);
    }

    #[test]
    fn realizable_data_is_already_optimal() {
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.4 - 1.0]).collect();
        let ys = xs
            .iter()
            .map(|x| forward(&theta_a(), Activation::Tanh, x).unwrap())
            .collect();
        let data = Dataset::new(xs, ys).unwrap();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let res = gradient_descent(&r, theta_a(), &DescentOptions::default()).unwrap();
        assert!(res.converged);
        assert!(res.risk < 1e-28);
    }

    #[test]
    fn divergence_is_reported() {
        let data = dataset_a();
        let r = EmpiricalRisk::new(Activation::Softplus, &Mse, &data);
        let opts = DescentOptions {
            lr: 1e6,
            max_iters: 1000,
            grad_tol: 1e-8,
            trace_every: 0,
        };
        assert!(matches!(
            gradient_descent(&r, theta_a(), &opts),
            Err(LandscapeError::Diverged { .. })
        ));
    }

    #[test]
    fn find_critical_small_net() {
        let data = Dataset::new(
            vec![vec![-1.0], vec![0.0], vec![1.0]],
            vec![vec![0.2], vec![1.0], vec![-0.6]],
        )
        .unwrap();
        let shape = NetShape::new(vec![1, 1, 1]).unwrap();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let search = CriticalSearch {
            seed: 0,
            init_scale: 1.0,
            descent: DescentOptions {
                lr: 0.1,
                max_iters: 20_000,
                grad_tol: 1e-8,
                trace_every: 0,
            },
            polish_steps: 30,
        };
        let rec = find_critical(&shape, &r, &search).unwrap();
        assert!(rec.gradient_inf_norm <= 1e-8, "{}", rec.gradient_inf_norm);
        assert!(rec.risk > 1e-3);
    }

    #[test]
    fn flat_point_is_critical_and_psd() {
        let rec = flat_critical_111();
        assert!(rec.gradient_inf_norm < 1e-14);
        assert_eq!(rec.classification, Classification::PsdDegenerate);
        assert!((rec.risk - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn classification_rules() {
        assert_eq!(classify(&[-1.0, 2.0], 1e-6), Classification::StrictSaddle);
        assert_eq!(
            classify(&[-5e-7, 2.0], 1e-6),
            Classification::IndefiniteNonstrictThreshold
        );
        assert_eq!(classify(&[1e-9, 2.0], 1e-6), Classification::PsdDegenerate);
        assert_eq!(
            classify(&[1.0, 2.0], 1e-6),
            Classification::PsdNondegenerate
        );
    }

    #[test]
    fn identity_embedding_keeps_inertia() {
        let rec = flat_critical_111();
        let data = three_points();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let cmp = inertia_compare(&r, &rec, &EmbeddingSpec::Identity).unwrap();
        assert_eq!(cmp.narrow, cmp.wide);
        let steps = EmbeddingSpec::Steps {
            steps: vec![EmbeddingStep::split(1, 1, 0.4), EmbeddingStep::null(1, 0.3)],
        };
        let cmp = inertia_compare(&r, &rec, &steps).unwrap();
        assert!(cmp.monotone, "{cmp:?}");
        assert_eq!(cmp.wide.dimension(), cmp.narrow.dimension() + 6);
    }

    #[test]
    fn pullback_identity_away_from_critical_points() {
        let data = dataset_a();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let th = theta_a();
        assert!(pullback_identity_check(&r, &th, |t| Ok(t.clone())).unwrap() < 1e-6);
        assert!(pullback_identity_check(&r, &th, |t| null_embed(t, 1, 0.4)).unwrap() < 1e-4);
        assert!(pullback_identity_check(&r, &th, |t| split_embed(t, 1, 2, 0.3)).unwrap() < 1e-4);
    }

    #[test]
    fn strict_saddle_from_best_fit() {
        let rec = flat_critical_111();
        assert!(rec.hessian.min_eigenvalue() >= -rec.zero_tol);
        assert!(rec.hessian.h2_upper.max_abs() > 1e-4);
        let data = three_points();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let c = strict_saddle_construct(&r, &rec, 1e-6).unwrap();
        assert_ne!(c.case, SaddleCase::Inconclusive);
        assert!(c.wide_min_eigenvalue < -1e-6, "{}", c.wide_min_eigenvalue);
        assert!(c.matches_prediction(), "{} vs {}", c.achieved, c.predicted);

        // H is linear in the loss
        let scaled = ScaledLoss {
            inner: Mse,
            factor: 3.0,
        };
        let rs = EmpiricalRisk::new(Activation::Tanh, &scaled, &data);
        let q1 = r.quadratic_form(&c.wide_params, &c.direction).unwrap();
        let q3 = rs.quadratic_form(&c.wide_params, &c.direction).unwrap();
        assert!((q3 - 3.0 * q1).abs() <= 1e-6 * (1.0 + q3.abs()));
    }

    #[test]
    fn threefold_directions_match_dense_quadratic_forms() {
        // u built from copy indices, evaluated against the assembled wide Hessian
        let rec = flat_critical_111();
        let data = three_points();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let c = strict_saddle_construct(&r, &rec, 1e-6).unwrap();
        let hw = r
            .hessian(&c.wide_params, HessianOptions::default())
            .unwrap();
        let dense = restricted_quadratic_form(&hw.h, &c.direction);
        assert!(
            (dense - c.achieved).abs() < 1e-5,
            "{dense} vs {}",
            c.achieved
        );
    }

    #[test]
    fn zero_trace_block_case() {
        // W^[2] = 0, b^[2] = mean target, odd features against even targets
        let data = Dataset::new(
            vec![vec![-1.0], vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![0.0], vec![1.0]],
        )
        .unwrap();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let shape = NetShape::new(vec![1, 1, 1]).unwrap();
        let th = ParamTuple::from_vector(&shape, &[0.8, 0.0, 0.0, 2.0 / 3.0]).unwrap();
        let rec = analyze_point(&r, &th).unwrap();
        assert!(rec.gradient_inf_norm < 1e-14);
        assert!(rec.hessian.h2_upper.max_abs() < 1e-7);
        let c = strict_saddle_construct(&r, &rec, 1e-6).unwrap();
        assert_eq!(c.case, SaddleCase::ZeroTraceBlock);
        assert!(c.matches_prediction(), "{} vs {}", c.achieved, c.predicted);
    }

    #[test]
    fn screen_verdicts() {
        let data = three_points();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let rec = flat_critical_111();
        let s = truly_bad_screen(&r, &rec, 1e-6).unwrap();
        assert_eq!(s.verdict, ScreenVerdict::NotCandidate);
        assert!(s.evidence.unwrap().wide_min_eigenvalue < -rec.zero_tol);

        let fit = Dataset::new(vec![vec![0.0]], vec![vec![0.5]]).unwrap();
        let rf = EmpiricalRisk::new(Activation::Tanh, &Mse, &fit);
        let rec = analyze_point(&rf, &theta_a()).unwrap();
        let s = truly_bad_screen(&rf, &rec, 1e-6).unwrap();
        assert!(s.candidate);
        assert!(s.h2_max <= 1e-6);
        let c = strict_saddle_construct(&rf, &rec, 1e-6).unwrap();
        assert_eq!(c.case, SaddleCase::Inconclusive);
    }

    #[test]
    fn dof_examples() {
        let id = IndexMapping::identity(&NetShape::new(vec![1, 2, 1]).unwrap());
        let rep = dof_verify(&id, Activation::Tanh, &[0]).unwrap();
        assert_eq!(rep.formula, 0);
        assert!(rep.all_match);
        assert_eq!(rep.samples[0].alpha_nullity, vec![0, 0]);

        let two = IndexMapping::new(vec![vec![1], vec![1, 2, 1, 2, 2], vec![1]]).unwrap();
        let rep = dof_verify(&two, Activation::Tanh, &[0, 1, 2]).unwrap();
        assert_eq!(rep.formula, 3);
        assert!(rep.all_match, "{rep:?}");

        let three =
            IndexMapping::new(vec![vec![1], vec![1, 2, 2], vec![1, 2, 1, 2], vec![1]]).unwrap();
        let rep = dof_verify(&three, Activation::Tanh, &[0, 1, 2]).unwrap();
        assert_eq!(rep.formula, 5);
        assert_eq!(rep.expected_alpha_nullity, vec![0, 2, 0]);
        assert!(rep.all_match, "{rep:?}");
        assert_eq!(rep.samples[0].alpha_nullity, vec![0, 2, 0]);
    }

    #[test]
    fn general_threefold_inertia_at_best_fit() {
        let rec = flat_critical_111();
        let data = three_points();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let spec = EmbeddingSpec::General(GeneralEmbedding::threefold(rec.params.shape()));
        let cmp = inertia_compare(&r, &rec, &spec).unwrap();
        assert!(cmp.monotone);
        assert!(cmp.wide.n_neg >= 1);
    }
}
