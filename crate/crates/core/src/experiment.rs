//! Desk-scale two-stage training experiment: a wide two-layer tanh network
//! trained from small initialization on a 1-D regression set, with plateau
//! detection and comparison against best fits of narrow networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::landscape::{levenberg_marquardt, newton_polish, LandscapeError, TracePoint};
use crate::network::{forward, Activation, Dataset, EmpiricalRisk, Mse, NetShape, ParamTuple};
use crate::numerics::{max_abs, seeded_rng};

/// Configuration of the two-stage run. Defaults are the shipped seed-7 setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStageConfig {
    pub seed: u64,
    pub target: Target,
    pub width: usize,
    pub n_points: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub init_scale: f64,
    pub lr: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub window: usize,
    /// Plateau when the mean `|Δrisk|` over the window is below
    /// `threshold · (1 + risk)`.
    pub threshold: f64,
    pub snapshot_every: usize,
    pub trace_every: usize,
    pub max_reference_width: usize,
    pub reference_restarts: usize,
    pub reference_iters: usize,
    pub reference_grad_tol: f64,
    pub grid_points: usize,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            seed: 7,
            target: Target::default(),
            width: 100,
            n_points: 30,
            x_min: -3.0,
            x_max: 3.0,
            init_scale: 1e-2,
            lr: 0.05,
            max_iters: 200_000,
            grad_tol: 1e-8,
            window: 500,
            threshold: 1e-7,
            snapshot_every: 50,
            trace_every: 100,
            max_reference_width: 4,
            reference_restarts: 12,
            reference_iters: 2_000,
            reference_grad_tol: 1e-6,
            grid_points: 201,
        }
    }
}

/// One term `amplitude · tanh(slope · (x − center))` of the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanhBump {
    pub amplitude: f64,
    pub slope: f64,
    pub center: f64,
}

/// Smooth 1-D target `offset + Σ bumps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bumps: Vec<TanhBump>,
    pub offset: f64,
}

impl Default for Target {
    fn default() -> Self {
        Target {
            bumps: vec![
                TanhBump {
                    amplitude: 1.0,
                    slope: 1.5,
                    center: 0.0,
                },
                TanhBump {
                    amplitude: 0.5,
                    slope: 4.0,
                    center: 1.5,
                },
            ],
            offset: 0.0,
        }
    }
}

impl Target {
    pub fn eval(&self, x: f64) -> f64 {
        self.offset
            + self
                .bumps
                .iter()
                .map(|b| b.amplitude * (b.slope * (x - b.center)).tanh())
                .sum::<f64>()
    }
}

/// `n` equally spaced inputs on `[x_min, x_max]` labelled by `target`.
pub fn two_stage_dataset(target: &Target, n: usize, x_min: f64, x_max: f64) -> Dataset {
    let xs: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                x_min
            } else {
                x_min + (x_max - x_min) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    Dataset::new(
        xs.iter().map(|&x| vec![x]).collect(),
        xs.iter().map(|&x| vec![target.eval(x)]).collect(),
    )
    .expect("non-empty dataset")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub start: usize,
    pub end: usize,
    pub risk: f64,
}

/// Maximal runs of iterations where the mean `|Δrisk|` over the trailing
/// window is below `threshold · (1 + risk)`. `risks[t]` is the risk at
/// iteration `t`.
pub fn detect_plateaus(risks: &[f64], window: usize, threshold: f64) -> Vec<Plateau> {
    let mut out = Vec::new();
    if window == 0 || risks.len() <= window {
        return out;
    }
    let diffs: Vec<f64> = risks.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let mut sum: f64 = diffs[..window].iter().sum();
    let mut current: Option<(usize, usize)> = None;
    for t in window..risks.len() {
        if t > window {
            sum += diffs[t - 1] - diffs[t - 1 - window];
        }
        let flat = sum / (window as f64) < threshold * (1.0 + risks[t]);
        match (flat, current) {
            (true, None) => current = Some((t - window, t)),
            (true, Some((s, _))) => current = Some((s, t)),
            (false, Some((s, e))) => {
                out.push(Plateau {
                    start: s,
                    end: e,
                    risk: risks[(s + e) / 2],
                });
                current = None;
            }
            (false, None) => {}
        }
    }
    if let Some((s, e)) = current {
        out.push(Plateau {
            start: s,
            end: e,
            risk: risks[(s + e) / 2],
        });
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceFit {
    pub width: usize,
    pub risk: f64,
    pub grad_inf_norm: f64,
    /// Seed of the random start, `0` for the warm start.
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlateauMatch {
    pub plateau: Plateau,
    /// Iteration of the snapshot compared against the references: the
    /// snapshot inside the plateau with the smallest gradient norm.
    pub snapshot_iteration: usize,
    /// Sup-distance on the grid to the nearest reference of each width `1..=k_max`.
    pub distances: Vec<f64>,
    /// Index into [`TwoStageReport::references`] of the overall nearest reference.
    pub nearest_reference: usize,
    pub nearest_width: usize,
    pub nearest_distance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub config: TwoStageConfig,
    pub final_risk: f64,
    pub final_grad_inf_norm: f64,
    pub iterations: usize,
    pub references: Vec<ReferenceFit>,
    pub plateaus: Vec<PlateauMatch>,
    pub trace: Vec<TracePoint>,
    /// Grid inputs, final wide output and reference outputs, for plotting.
    pub grid: Vec<f64>,
    pub wide_output: Vec<f64>,
    pub reference_outputs: Vec<Vec<f64>>,
}

impl TwoStageReport {
    /// True when some plateau's nearest reference has width `≤ max_width`
    /// within `bound` sup-distance.
    pub fn has_narrow_plateau(&self, max_width: usize, bound: f64) -> bool {
        self.plateaus
            .iter()
            .any(|p| p.nearest_width <= max_width && p.nearest_distance <= bound)
    }
}

fn outputs_on(theta: &ParamTuple, grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&x| forward(theta, Activation::Tanh, &[x]).expect("1-D net")[0])
        .collect()
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Critical points of a width-`k` tanh network, lowest risk first:
/// Levenberg–Marquardt from random restarts and from `warm`, then Newton
/// polishing. Keeps every start that reaches `‖∇R‖_∞ ≤ reference_grad_tol`
/// with a distinct output on `grid`, and always keeps the best fit.
pub fn train_references(
    data: &Dataset,
    k: usize,
    warm: Option<&ParamTuple>,
    grid: &[f64],
    cfg: &TwoStageConfig,
) -> Result<Vec<(ParamTuple, ReferenceFit)>, LandscapeError> {
    let risk = EmpiricalRisk::new(Activation::Tanh, &Mse, data);
    let shape = NetShape::new(vec![1, k, 1])?;
    let mut starts: Vec<(u64, ParamTuple)> = (0..cfg.reference_restarts)
        .map(|restart| {
            let seed = cfg
                .seed
                .wrapping_mul(1000)
                .wrapping_add(100 * k as u64 + restart as u64 + 1);
            (
                seed,
                ParamTuple::random_normal(&shape, 1.0, &mut seeded_rng(seed)),
            )
        })
        .collect();
    if let Some(w) = warm {
        starts.push((0, w.clone()));
    }
    let mut fits = Vec::new();
    for (seed, init) in starts {
        let res = levenberg_marquardt(&risk, init, cfg.grad_tol, cfg.reference_iters)?;
        let res = if res.converged {
            res
        } else {
            newton_polish(&risk, res.params, cfg.grad_tol, 20)?
        };
        if res.risk.is_finite() {
            let fit = ReferenceFit {
                width: k,
                risk: res.risk,
                grad_inf_norm: res.grad_inf_norm,
                seed,
            };
            fits.push((res.params, fit));
        }
    }
    fits.sort_by(|a, b| a.1.risk.total_cmp(&b.1.risk));
    let mut kept: Vec<(ParamTuple, ReferenceFit)> = Vec::new();
    let mut outputs: Vec<Vec<f64>> = Vec::new();
    for (i, (params, fit)) in fits.into_iter().enumerate() {
        if i > 0 && fit.grad_inf_norm > cfg.reference_grad_tol {
            continue;
        }
        let out = outputs_on(&params, grid);
        if outputs.iter().any(|o| sup_distance(o, &out) < 1e-4) {
            continue;
        }
        outputs.push(out);
        kept.push((params, fit));
    }
    if kept.is_empty() {
        return Err(LandscapeError::Diverged { iteration: 0 });
    }
    Ok(kept)
}

/// Appends a hidden neuron with small input weights and zero output weight.
fn widen_by_one(theta: &ParamTuple, seed: u64) -> ParamTuple {
    let mut rng = seeded_rng(seed);
    let k = theta.shape().width(1);
    let shape = NetShape::new(vec![1, k + 1, 1]).expect("valid widths");
    let mut out = ParamTuple::zeros(&shape);
    for i in 0..k {
        out.weight_mut(1)[(i, 0)] = theta.weight(1)[(i, 0)];
        out.bias_mut(1)[i] = theta.bias(1)[i];
        out.weight_mut(2)[(0, i)] = theta.weight(2)[(0, i)];
    }
    out.weight_mut(1)[(k, 0)] = rng.random_range(-2.0..2.0);
    out.bias_mut(1)[k] = rng.random_range(-2.0..2.0);
    out.weight_mut(2)[(0, k)] = 1e-3;
    out.bias_mut(2)[0] = theta.bias(2)[0];
    out
}

/// Runs the two-stage experiment.
pub fn run_two_stage(cfg: &TwoStageConfig) -> Result<TwoStageReport, LandscapeError> {
    let data = two_stage_dataset(&cfg.target, cfg.n_points, cfg.x_min, cfg.x_max);
    let risk = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
    let shape = NetShape::new(vec![1, cfg.width, 1])?;
    let init = ParamTuple::random_normal(&shape, cfg.init_scale, &mut seeded_rng(cfg.seed));

    let mut v = init.to_vector();
    let mut risks = Vec::with_capacity(cfg.max_iters + 1);
    let mut grad_norms = Vec::with_capacity(cfg.max_iters + 1);
    let mut trace = Vec::new();
    let mut snapshots: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut iterations = 0;
    let mut last_grad = f64::INFINITY;
    for it in 0..=cfg.max_iters {
        let theta = ParamTuple::from_vector(&shape, &v)?;
        let (r, g) = risk.risk_and_gradient(&theta)?;
        if !r.is_finite() {
            return Err(LandscapeError::Diverged { iteration: it });
        }
        let gn = max_abs(&g);
        risks.push(r);
        grad_norms.push(gn);
        last_grad = gn;
        iterations = it;
        if cfg.trace_every > 0 && it % cfg.trace_every == 0 {
            trace.push(TracePoint {
                iteration: it,
                risk: r,
                grad_inf_norm: gn,
            });
        }
        if cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0 {
            snapshots.push((it, v.clone()));
        }
        if gn <= cfg.grad_tol || it == cfg.max_iters {
            break;
        }
        for (p, d) in v.iter_mut().zip(&g) {
            *p -= cfg.lr * d;
        }
    }
    let final_theta = ParamTuple::from_vector(&shape, &v)?;
    if trace.last().map(|t| t.iteration) != Some(iterations) {
        trace.push(TracePoint {
            iteration: iterations,
            risk: risks[iterations],
            grad_inf_norm: last_grad,
        });
    }

    let grid: Vec<f64> = (0..cfg.grid_points)
        .map(|i| {
            cfg.x_min + (cfg.x_max - cfg.x_min) * i as f64 / (cfg.grid_points.max(2) - 1) as f64
        })
        .collect();
    let mut references = Vec::new();
    let mut reference_outputs = Vec::new();
    let mut previous: Option<ParamTuple> = None;
    for k in 1..=cfg.max_reference_width {
        let warm = previous
            .as_ref()
            .map(|p| widen_by_one(p, cfg.seed.wrapping_add(k as u64)));
        let fits = train_references(&data, k, warm.as_ref(), &grid, cfg)?;
        previous = Some(fits[0].0.clone());
        for (params, fit) in fits {
            reference_outputs.push(outputs_on(&params, &grid));
            references.push(fit);
        }
    }

    let plateaus = detect_plateaus(&risks, cfg.window, cfg.threshold)
        .into_iter()
        .filter_map(|p| {
            let mid = (p.start + p.end) / 2;
            let (it, snap) = snapshots
                .iter()
                .filter(|(it, _)| (p.start..=p.end).contains(it))
                .min_by(|a, b| grad_norms[a.0].total_cmp(&grad_norms[b.0]))
                .or_else(|| snapshots.iter().min_by_key(|(it, _)| it.abs_diff(mid)))?;
            let theta = ParamTuple::from_vector(&shape, snap).ok()?;
            let out = outputs_on(&theta, &grid);
            let all: Vec<f64> = reference_outputs
                .iter()
                .map(|r| sup_distance(&out, r))
                .collect();
            let distances: Vec<f64> = (1..=cfg.max_reference_width)
                .map(|k| {
                    references
                        .iter()
                        .zip(&all)
                        .filter(|(f, _)| f.width == k)
                        .map(|(_, &d)| d)
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let (idx, &nearest) = all.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
            Some(PlateauMatch {
                plateau: p,
                snapshot_iteration: *it,
                distances,
                nearest_reference: idx,
                nearest_width: references[idx].width,
                nearest_distance: nearest,
            })
        })
        .collect();

    Ok(TwoStageReport {
        config: cfg.clone(),
        final_risk: risks[iterations],
        final_grad_inf_norm: last_grad,
        iterations,
        references,
        plateaus,
        trace,
        wide_output: outputs_on(&final_theta, &grid),
        grid,
        reference_outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_detection_on_synthetic_curve() {
        // drop, flat, drop, flat
        let mut r = Vec::new();
        for t in 0..1000 {
            r.push(1.0 - 0.0005 * t as f64);
        }
        r.extend(std::iter::repeat_n(0.5, 2000));
        for t in 0..1000 {
            r.push(0.5 - 0.0004 * t as f64);
        }
        r.extend(std::iter::repeat_n(0.1, 2000));
        let ps = detect_plateaus(&r, 500, 1e-7);
        assert_eq!(ps.len(), 2);
        assert!(ps[0].end < ps[1].start);
        assert!((ps[0].risk - 0.5).abs() < 1e-12);
        assert!((ps[1].risk - 0.1).abs() < 1e-12);
        assert!(detect_plateaus(&r[..100], 500, 1e-7).is_empty());
    }

    #[test]
    fn dataset_shape() {
        let d = two_stage_dataset(&Target::default(), 30, -3.0, 3.0);
        assert_eq!(d.len(), 30);
        assert_eq!(d.inputs[0], vec![-3.0]);
        assert_eq!(d.inputs[29], vec![3.0]);
    }

    #[test]
    fn self_comparison_has_zero_distance() {
        let cfg = TwoStageConfig {
            width: 1,
            max_reference_width: 1,
            reference_restarts: 1,
            reference_iters: 2000,
            ..Default::default()
        };
        let data = two_stage_dataset(&cfg.target, cfg.n_points, cfg.x_min, cfg.x_max);
        let grid = [-1.0, 0.0, 2.0];
        let (a, _) = train_references(&data, 1, None, &grid, &cfg)
            .unwrap()
            .remove(0);
        let (b, _) = train_references(&data, 1, None, &grid, &cfg)
            .unwrap()
            .remove(0);
        assert_eq!(
            sup_distance(&outputs_on(&a, &grid), &outputs_on(&b, &grid)),
            0.0
        );
    }
}
