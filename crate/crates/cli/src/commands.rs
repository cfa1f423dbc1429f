use std::path::{Path, PathBuf};

use critembed::embedding::{
    check_certificate_trace, representation_residual, validate_compatibility,
    CertificateTraceReport, CompatibilityReport, EmbeddingSpec, IndexMapping,
};
use critembed::experiment::{run_two_stage, TwoStageConfig};
use critembed::landscape::{
    analyze_point, dof_verify, gradient_descent, levenberg_marquardt, newton_polish,
    pullback_identity_check, truly_bad_screen, Classification, DescentOptions, DofReport,
    ScreenReport,
};
use critembed::network::{
    forward, loss_by_name, Activation, Dataset, EmpiricalRisk, HessianMode, HessianOptions, Mse,
    NetShape, ParamFile, ParamTuple,
};
use critembed::numerics::{max_abs, Inertia};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::error::CliError;
use crate::io::{read_json, to_json, write_json, write_table_csv, write_trace_csv};

/// Eigenvalue lists longer than this keep only the extremal values.
pub const MAX_EIGENVALUES: usize = 64;

pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Global {
    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn load_params(path: &Path) -> Result<(ParamTuple, Activation), CliError> {
    read_json::<ParamFile>(path)?
        .into_parts()
        .map_err(|e| CliError::Usage(format!("schema error in {}: {e}", path.display())))
}

fn load_dataset(path: &Path, shape: &NetShape) -> Result<Dataset, CliError> {
    let data: Dataset = read_json(path)?;
    data.validate()
        .map_err(|e| CliError::Usage(format!("invalid dataset {}: {e}", path.display())))?;
    if data.input_dim() != shape.input_dim() || data.output_dim() != shape.output_dim() {
        return Err(CliError::Usage(format!(
            "dataset {} has dimensions ({}, {}) but the network is {shape}",
            path.display(),
            data.input_dim(),
            data.output_dim()
        )));
    }
    Ok(data)
}

fn print<T: Serialize>(value: &T) {
    print!("{}", to_json(value));
}

/// The `k/2` smallest and `k/2` largest of an ascending list.
fn extremal(values: &[f64], k: usize) -> (Vec<f64>, bool) {
    if values.len() <= k {
        return (values.to_vec(), false);
    }
    let half = k / 2;
    let mut out = values[..half].to_vec();
    out.extend_from_slice(&values[values.len() - (k - half)..]);
    (out, true)
}

/// Largest `|f_narrow(x) − f_wide(x)| / max(1, |f_narrow(x)|)` over the inputs.
fn output_difference(
    narrow: &ParamTuple,
    wide: &ParamTuple,
    sigma: Activation,
    data: &Dataset,
) -> Result<f64, CliError> {
    let mut worst: f64 = 0.0;
    for x in &data.inputs {
        let a = forward(narrow, sigma, x)?;
        let b = forward(wide, sigma, x)?;
        for (u, v) in a.iter().zip(&b) {
            worst = worst.max((u - v).abs() / u.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[derive(Serialize)]
struct TrainSummary {
    shape: NetShape,
    activation: Activation,
    samples: usize,
    final_risk: f64,
    grad_inf_norm: f64,
    iterations: usize,
    polish_steps: usize,
    converged: bool,
    params_file: PathBuf,
    trace_file: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedded_file: Option<PathBuf>,
}

pub fn train(g: &Global) -> Result<(), CliError> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("train needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(tol) = g.tol {
        cfg.optimizer.grad_tol = tol;
    }
    let out = g
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| g.out());
    let data = cfg.dataset()?;
    let loss = loss_by_name(&cfg.loss)?;
    let risk = EmpiricalRisk::new(cfg.activation, loss.as_ref(), &data);
    let init = ParamTuple::random_normal(
        &cfg.shape,
        cfg.init_scale,
        &mut critembed::numerics::seeded_rng(cfg.seed),
    );
    let opt = &cfg.optimizer;
    let res = match opt.method {
        Method::Gd => gradient_descent(
            &risk,
            init,
            &DescentOptions {
                lr: opt.lr,
                max_iters: opt.max_iters,
                grad_tol: opt.grad_tol,
                trace_every: opt.trace_every,
            },
        )?,
        Method::Lm => levenberg_marquardt(&risk, init, opt.grad_tol, opt.max_iters)?,
    };
    let iterations = res.iterations;
    let mut trace = res.trace.clone();
    let (res, polish_steps) =
        if !res.converged && opt.polish_steps > 0 && cfg.activation.is_twice_differentiable() {
            let p = newton_polish(&risk, res.params, opt.grad_tol, opt.polish_steps)?;
            let steps = p.iterations;
            (p, steps)
        } else {
            (res, 0)
        };
    if !res.risk.is_finite() {
        return Err(CliError::Numerical(
            "training produced a non-finite risk".into(),
        ));
    }
    if polish_steps > 0 {
        trace.push(critembed::landscape::TracePoint {
            iteration: iterations + polish_steps,
            risk: res.risk,
            grad_inf_norm: res.grad_inf_norm,
        });
    }
    let params_file = out.join("params.json");
    let trace_file = out.join("trace.csv");
    write_json(&params_file, &ParamFile::new(&res.params, cfg.activation))?;
    write_trace_csv(&trace_file, &trace)?;
    let embedded_file = match &cfg.embedding {
        Some(spec_path) => {
            let spec: EmbeddingSpec = read_json(spec_path)?;
            let wide = spec.apply(&res.params)?;
            let file = out.join("embedded_params.json");
            write_json(&file, &ParamFile::new(&wide, cfg.activation))?;
            Some(file)
        }
        None => None,
    };
    let summary = TrainSummary {
        shape: cfg.shape.clone(),
        activation: cfg.activation,
        samples: data.len(),
        final_risk: res.risk,
        grad_inf_norm: res.grad_inf_norm,
        iterations,
        polish_steps,
        converged: res.grad_inf_norm <= opt.grad_tol,
        params_file,
        trace_file,
        embedded_file,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    print(&summary);
    Ok(())
}

#[derive(Serialize)]
struct EmbedSummary {
    narrow_shape: NetShape,
    wide_shape: NetShape,
    max_output_difference: f64,
    compatibility: CompatibilityReport,
    wide_params_file: PathBuf,
}

pub fn embed(
    g: &Global,
    params: &Path,
    spec_path: &Path,
    data_path: &Path,
) -> Result<(), CliError> {
    let (narrow, sigma) = load_params(params)?;
    let spec: EmbeddingSpec = read_json(spec_path)?;
    let data = load_dataset(data_path, narrow.shape())?;
    let wide = spec.apply(&narrow)?;
    let emb = spec.presentation(narrow.shape())?;
    let tol = g.tol.unwrap_or(1e-8);
    let compatibility = validate_compatibility(&emb, sigma, tol)?;
    let wide_params_file = g.out().join("wide_params.json");
    write_json(&wide_params_file, &ParamFile::new(&wide, sigma))?;
    print(&EmbedSummary {
        narrow_shape: narrow.shape().clone(),
        wide_shape: wide.shape().clone(),
        max_output_difference: output_difference(&narrow, &wide, sigma, &data)?,
        compatibility,
        wide_params_file,
    });
    Ok(())
}

pub struct VerifyTolerances {
    pub output: f64,
    pub representation: f64,
    pub critical: f64,
    pub criticality: f64,
    pub trace: f64,
    pub pullback: f64,
}

#[derive(Serialize)]
struct Check {
    value: f64,
    tol: f64,
    passed: bool,
}

impl Check {
    fn at_most(value: f64, tol: f64) -> Self {
        Check {
            value,
            tol,
            passed: value <= tol,
        }
    }
}

#[derive(Serialize)]
struct Criticality {
    narrow_grad_inf_norm: f64,
    wide_grad_inf_norm: f64,
    narrow_is_critical: bool,
    critical_tol: f64,
    tol: f64,
    passed: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    narrow_shape: NetShape,
    wide_shape: NetShape,
    output_preservation: Check,
    representation: Check,
    criticality: Criticality,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate_trace: Option<CertificateTraceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pullback_identity: Option<Check>,
    passed: bool,
}

pub fn verify(
    g: &Global,
    narrow_path: &Path,
    wide_path: Option<&Path>,
    spec_path: Option<&Path>,
    data_path: &Path,
    tol: &VerifyTolerances,
) -> Result<(), CliError> {
    let (narrow, sigma) = load_params(narrow_path)?;
    let data = load_dataset(data_path, narrow.shape())?;
    let spec: Option<EmbeddingSpec> = spec_path.map(read_json).transpose()?;
    let wide = match (wide_path, &spec) {
        (Some(p), _) => {
            let (wide, wide_sigma) = load_params(p)?;
            if wide_sigma != sigma {
                return Err(CliError::Usage(format!(
                    "activation mismatch: {sigma} vs {wide_sigma}"
                )));
            }
            wide
        }
        (None, Some(s)) => s.apply(&narrow)?,
        (None, None) => return Err(CliError::Usage("verify needs --wide or --spec".into())),
    };
    if !narrow.shape().is_narrower_than(wide.shape()) {
        return Err(CliError::Usage(format!(
            "{} is not narrower than {}",
            narrow.shape(),
            wide.shape()
        )));
    }
    let risk = EmpiricalRisk::new(sigma, &Mse, &data);

    let output_preservation =
        Check::at_most(output_difference(&narrow, &wide, sigma, &data)?, tol.output);
    let representation = Check::at_most(
        representation_residual(&narrow, &wide, sigma, &data)?,
        tol.representation,
    );
    let ng = max_abs(&risk.gradient(&narrow)?);
    let wg = max_abs(&risk.gradient(&wide)?);
    let narrow_is_critical = ng <= tol.critical;
    let criticality = Criticality {
        narrow_grad_inf_norm: ng,
        wide_grad_inf_norm: wg,
        narrow_is_critical,
        critical_tol: tol.critical,
        tol: tol.criticality,
        passed: !narrow_is_critical || wg <= tol.criticality,
    };
    let (certificate_trace, pullback_identity) = match &spec {
        Some(s) => {
            let emb = s.presentation(narrow.shape())?;
            let trace = if emb.index_map.wide_shape() == *wide.shape() {
                check_certificate_trace(&narrow, &wide, &emb, sigma, &Mse, &data, tol.trace)?
            } else {
                return Err(CliError::Usage(
                    "wide parameters do not match the spec's wide shape".into(),
                ));
            };
            let pullback = if sigma.is_twice_differentiable() {
                let r = pullback_identity_check(&risk, &narrow, |t| s.apply(t))?;
                Some(Check::at_most(r, tol.pullback))
            } else {
                None
            };
            (Some(trace), pullback)
        }
        None => (None, None),
    };
    let passed = output_preservation.passed
        && representation.passed
        && criticality.passed
        && certificate_trace.as_ref().is_none_or(|t| t.passed)
        && pullback_identity.as_ref().is_none_or(|c| c.passed);
    let report = VerifyReport {
        narrow_shape: narrow.shape().clone(),
        wide_shape: wide.shape().clone(),
        output_preservation,
        representation,
        criticality,
        certificate_trace,
        pullback_identity,
        passed,
    };
    write_json(&g.out().join("verify_report.json"), &report)?;
    print(&report);
    if passed {
        Ok(())
    } else {
        Err(CliError::Verification(
            "at least one check failed; see verify_report.json".into(),
        ))
    }
}

#[derive(Serialize)]
struct HessianSummary {
    shape: NetShape,
    activation: Activation,
    mode: HessianMode,
    risk: f64,
    gradient_inf_norm: f64,
    zero_tol: f64,
    inertia: Inertia,
    n_neg: usize,
    classification: Classification,
    eigenvalue_count: usize,
    eigenvalues_truncated: bool,
    eigenvalues: Vec<f64>,
    h_max: f64,
    h2_max: f64,
    h2_upper_max: f64,
    upper_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    matrices: Option<Matrices>,
}

#[derive(Serialize)]
struct Matrices {
    h: critembed::numerics::DenseMatrix,
    h1: critembed::numerics::DenseMatrix,
    h2: critembed::numerics::DenseMatrix,
}

pub fn hessian(
    g: &Global,
    params: &Path,
    data_path: &Path,
    mode: HessianMode,
    matrices: bool,
) -> Result<(), CliError> {
    let (theta, sigma) = load_params(params)?;
    let data = load_dataset(data_path, theta.shape())?;
    let risk = EmpiricalRisk::new(sigma, &Mse, &data);
    let mut rec = analyze_point(&risk, &theta)?;
    if mode != HessianMode::AnalyticH1Fd || g.tol.is_some() {
        let zero_tol = g.tol.unwrap_or(rec.zero_tol);
        rec.hessian = risk.hessian(
            &theta,
            HessianOptions {
                mode,
                zero_tol,
                ..Default::default()
            },
        )?;
        rec.zero_tol = zero_tol;
        rec.classification = critembed::landscape::classify(&rec.hessian.eigenvalues, zero_tol);
    }
    let rep = &rec.hessian;
    let (eigenvalues, eigenvalues_truncated) = extremal(&rep.eigenvalues, MAX_EIGENVALUES);
    let summary = HessianSummary {
        shape: theta.shape().clone(),
        activation: sigma,
        mode,
        risk: rec.risk,
        gradient_inf_norm: rec.gradient_inf_norm,
        zero_tol: rec.zero_tol,
        inertia: rep.inertia,
        n_neg: rep.inertia.n_neg,
        classification: rec.classification,
        eigenvalue_count: rep.eigenvalues.len(),
        eigenvalues_truncated,
        eigenvalues,
        h_max: rep.h.max_abs(),
        h2_max: rep.h2.max_abs(),
        h2_upper_max: rep.h2_upper.max_abs(),
        upper_dim: rep.upper_dim,
        matrices: matrices.then(|| Matrices {
            h: rep.h.clone(),
            h1: rep.h1.clone(),
            h2: rep.h2.clone(),
        }),
    };
    write_json(&g.out().join("hessian_report.json"), &summary)?;
    print(&summary);
    Ok(())
}

#[derive(Serialize)]
struct SaddleSummary {
    shape: NetShape,
    risk: f64,
    gradient_inf_norm: f64,
    classification: Classification,
    screen: ScreenReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    wide_params_file: Option<PathBuf>,
}

pub fn saddle(g: &Global, params: &Path, data_path: &Path, h2_tol: f64) -> Result<(), CliError> {
    let (theta, sigma) = load_params(params)?;
    let data = load_dataset(data_path, theta.shape())?;
    let risk = EmpiricalRisk::new(sigma, &Mse, &data);
    let rec = analyze_point(&risk, &theta)?;
    let screen = truly_bad_screen(&risk, &rec, h2_tol)?;
    let wide_params_file = match &screen.evidence {
        Some(ev) => {
            let file = g.out().join("saddle_wide_params.json");
            write_json(&file, &ParamFile::new(&ev.wide_params, sigma))?;
            Some(file)
        }
        None => None,
    };
    let summary = SaddleSummary {
        shape: theta.shape().clone(),
        risk: rec.risk,
        gradient_inf_norm: rec.gradient_inf_norm,
        classification: rec.classification,
        screen,
        wide_params_file,
    };
    write_json(&g.out().join("saddle_report.json"), &summary)?;
    print(&summary);
    Ok(())
}

pub fn dof(g: &Global, map_path: &Path, seeds: usize, sigma: Activation) -> Result<(), CliError> {
    let map: IndexMapping = read_json(map_path)?;
    let base = g.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..seeds as u64).map(|k| base + k).collect();
    let report: DofReport = dof_verify(&map, sigma, &seeds)?;
    write_json(&g.out().join("dof_report.json"), &report)?;
    print(&report);
    if report.all_match {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "measured degrees of freedom differ from the formula {}",
            report.formula
        )))
    }
}

#[derive(Serialize)]
struct TwoStageSummary {
    final_risk: f64,
    iterations: usize,
    plateaus: usize,
    message: String,
    report_file: PathBuf,
    trace_file: PathBuf,
    plot_file: PathBuf,
}

pub fn two_stage(g: &Global) -> Result<(), CliError> {
    let mut cfg: TwoStageConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => TwoStageConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(tol) = g.tol {
        cfg.threshold = tol;
    }
    let rep = run_two_stage(&cfg)?;
    let report_file = g.out().join("two_stage_report.json");
    let trace_file = g.out().join("two_stage_trace.csv");
    let plot_file = g.out().join("two_stage_plot.csv");
    write_json(&report_file, &rep)?;
    write_trace_csv(&trace_file, &rep.trace)?;
    let mut header = vec!["x".to_string(), "wide".to_string()];
    header.extend(
        rep.references
            .iter()
            .enumerate()
            .map(|(i, r)| format!("ref{i}_width{}", r.width)),
    );
    let rows: Vec<Vec<f64>> = rep
        .grid
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let mut row = vec![x, rep.wide_output[k]];
            row.extend(rep.reference_outputs.iter().map(|r| r[k]));
            row
        })
        .collect();
    write_table_csv(&plot_file, &header, &rows)?;
    let message = match rep.plateaus.iter().min_by(|a, b| a.nearest_distance.total_cmp(&b.nearest_distance)) {
        None => "no plateau detected (the phenomenon depends on the initialization)".to_string(),
        Some(p) => format!(
            "{} plateau(s); closest: iterations {}..{} at sup-distance {:.4} from a width-{} reference",
            rep.plateaus.len(),
            p.plateau.start,
            p.plateau.end,
            p.nearest_distance,
            p.nearest_width
        ),
    };
    print(&TwoStageSummary {
        final_risk: rep.final_risk,
        iterations: rep.iterations,
        plateaus: rep.plateaus.len(),
        message,
        report_file,
        trace_file,
        plot_file,
    });
    Ok(())
}
