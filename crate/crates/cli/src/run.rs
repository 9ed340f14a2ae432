//! Experiment execution and report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use equichk::dynamics::{
    gradient_descent, gradient_flow, noether_drift_check, norm_growth_check, sgf, DescentConfig, DriftConfig,
    Ensemble, FlowConfig, NoiseModel, NormGrowthStatus, SgfConfig, Trajectory,
};
use equichk::identities::{
    run_suite, stationary_null_count, IdentityReport, ReportContext, SuiteEntry, SuiteSpec,
};
use equichk::transforms::{noether_charge, Charge, Transformation};
use equichk::{Model, Objective};
use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig, Loaded};
use crate::CliError;

/// Reports plus any auxiliary files, before anything is written.
#[derive(Default)]
pub struct RunOutput {
    pub reports: Vec<IdentityReport>,
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, String)>,
}

#[derive(Debug, Serialize)]
pub struct CheckCount {
    pub passed: usize,
    pub failed: usize,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: &'static str,
    pub config_digest: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub passed: usize,
    pub failed: usize,
    pub checks: BTreeMap<String, CheckCount>,
    pub files: Vec<String>,
}

fn runtime(e: equichk::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn execute(loaded: &Loaded) -> Result<RunOutput, CliError> {
    let c = &loaded.config;
    match c.experiment {
        Experiment::CheckSuite => check_suite(c),
        Experiment::Flow => flow(c, model(loaded), &loaded.transforms),
        Experiment::SgfDrift => sgf_drift(c, model(loaded), &loaded.transforms),
        Experiment::StationarySpectrum => stationary(c, model(loaded), &loaded.transforms),
    }
}

fn model(loaded: &Loaded) -> &Model {
    loaded.model.as_ref().expect("validated configs carry a model outside catalog mode")
}

fn check_suite(c: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let entries = if c.catalog {
        SuiteSpec::full_catalog().entries
    } else {
        vec![SuiteEntry {
            model: c.model.clone().expect("validated"),
            loss: c.loss.clone().expect("validated"),
            transforms: c.transforms.clone(),
        }]
    };
    let mut out = RunOutput::default();
    for &seed in &c.seeds {
        let spec = SuiteSpec {
            entries: entries.clone(),
            positions: c.positions,
            seed,
            diff: c.diff,
            tolerance: c.tolerances.identity,
            last_layer_trials: c.last_layer_trials,
            mutation: c.mutation.clone(),
        };
        out.reports.extend(run_suite(&spec).map_err(runtime)?);
    }
    Ok(out)
}

fn objective(c: &ExperimentConfig, model: &Model) -> Result<Objective, CliError> {
    let loss = c.loss.as_ref().expect("validated");
    match &c.dataset {
        Some(ds) => Objective::new(model, loss.family, ds).map_err(|e| CliError::Config(format!("dataset: {e}"))),
        None => Objective::single(model, loss).map_err(runtime),
    }
}

fn context(model: &Model, obj: &Objective, transform: Option<&str>, seed: u64) -> ReportContext {
    ReportContext {
        model: model.name.clone(),
        loss: obj.family.name().to_string(),
        transform: transform.map(str::to_string),
        seed: Some(seed),
        ..ReportContext::default()
    }
}

/// Charges of the configured transformations that have one.
fn charges(transforms: &[Transformation]) -> Vec<(String, Charge)> {
    transforms
        .iter()
        .filter_map(|t| noether_charge(t).ok().map(|c| (t.name.clone(), c)))
        .collect()
}

fn initial(c: &ExperimentConfig, model: &Model) -> Vec<f64> {
    c.dynamics.initial.clone().unwrap_or_else(|| model.init.clone())
}

fn flow(c: &ExperimentConfig, model: &Model, transforms: &[Transformation]) -> Result<RunOutput, CliError> {
    let obj = objective(c, model)?;
    let seed = c.seeds[0];
    let theta0 = initial(c, model);
    let charged = charges(transforms);
    let charge_list: Vec<Charge> = charged.iter().map(|(_, ch)| ch.clone()).collect();
    let d = &c.dynamics;
    let traj = gradient_flow(&obj, &theta0, &FlowConfig { t_end: d.t_end, dt: d.dt }, &charge_list).map_err(runtime)?;
    let mut out = RunOutput::default();
    for (tname, ch) in &charged {
        let drift = traj.charge_drift(&ch.name).unwrap_or(f64::NAN);
        let c0 = traj.charges[&ch.name][0];
        let mut r = IdentityReport::from_norms(
            "charge_conservation",
            "Noether charge constant along gradient flow",
            c0.abs(),
            traj.charges[&ch.name].last().copied().unwrap_or(f64::NAN).abs(),
            drift * (1.0 + c0.abs()),
            1.0 + c0.abs(),
            c.tolerances.charge,
            context(model, &obj, Some(tname), seed),
        );
        r.rel_residual = drift;
        r.pass = drift <= c.tolerances.charge;
        out.reports.push(r);
    }
    if let Ok(ng) = norm_growth_check(&obj, &traj, c.tolerances.norm_growth) {
        let mut r = IdentityReport::from_norms(
            "norm_growth",
            "d/dt ½‖θ‖² against the homogeneity prediction",
            0.0,
            0.0,
            0.0,
            1.0,
            c.tolerances.norm_growth,
            context(model, &obj, None, seed),
        );
        r.rel_residual = ng.max_euler_rel;
        r.pass = ng.pass;
        r.extra.insert("monotone".into(), f64::from(u8::from(ng.monotone)));
        r.extra.insert("fd_rel".into(), ng.max_fd_rel);
        r.extra.insert(
            "never_correctly_classified".into(),
            f64::from(u8::from(ng.status == NormGrowthStatus::NeverCorrectlyClassified)),
        );
        if let Some(t0) = ng.t0 {
            r.extra.insert("t0".into(), t0);
        }
        out.reports.push(r);
    }
    out.files.push(("trajectory_flow.csv".into(), traj.to_csv()));
    out.files.push(("trajectory_flow.json".into(), summary_json(&traj)));
    if let Some(eta) = d.eta {
        let symmetries: Vec<Transformation> = transforms
            .iter()
            .filter(|t| t.is_symmetry && t.kind == equichk::transforms::TransformKind::Continuous)
            .cloned()
            .collect();
        let gd = gradient_descent(&obj, &theta0, &DescentConfig { eta, steps: d.steps }, &charge_list, &symmetries)
            .map_err(runtime)?;
        if !symmetries.is_empty() {
            let worst = gd.summary["max_orthogonality"];
            let mut r = IdentityReport::from_norms(
                "step_orthogonality",
                "descent steps orthogonal to symmetry directions",
                worst,
                0.0,
                worst,
                1.0,
                c.tolerances.orthogonality,
                context(model, &obj, None, seed),
            );
            r.rel_residual = worst;
            r.pass = worst <= c.tolerances.orthogonality;
            r.extra.insert("eta".into(), eta);
            r.extra.insert("oscillation".into(), gd.summary["oscillation"]);
            out.reports.push(r);
        }
        out.files.push(("trajectory_descent.csv".into(), gd.to_csv()));
        out.files.push(("trajectory_descent.json".into(), summary_json(&gd)));
    }
    Ok(out)
}

/// Whole-run scalars and events of a trajectory.
fn summary_json(t: &Trajectory) -> String {
    #[derive(Serialize)]
    struct Summary<'a> {
        records: usize,
        summary: &'a BTreeMap<String, f64>,
        events: &'a [String],
    }
    let s = Summary {
        records: t.times.len(),
        summary: &t.summary,
        events: &t.events,
    };
    serde_json::to_string_pretty(&s).expect("serializable") + "\n"
}

fn ensemble_manifest(e: &Ensemble) -> String {
    #[derive(Serialize)]
    struct Member<'a> {
        index: usize,
        final_state: &'a [f64],
        final_charges: BTreeMap<&'a str, f64>,
        summary: &'a BTreeMap<String, f64>,
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        noise: &'a NoiseModel,
        config: &'a SgfConfig,
        stream_rule: &'static str,
        members: Vec<Member<'a>>,
        events: Vec<&'a str>,
    }
    let m = Manifest {
        noise: &e.noise,
        config: &e.config,
        stream_rule: "ChaCha8 seeded by the master seed, stream = member index",
        members: e
            .trajectories
            .iter()
            .enumerate()
            .map(|(index, t)| Member {
                index,
                final_state: t.final_state().unwrap_or(&[]),
                final_charges: t
                    .charges
                    .iter()
                    .map(|(k, v)| (k.as_str(), v.last().copied().unwrap_or(f64::NAN)))
                    .collect(),
                summary: &t.summary,
            })
            .collect(),
        events: e.trajectories.iter().flat_map(|t| t.events.iter().map(String::as_str)).collect(),
    };
    serde_json::to_string(&m).expect("serializable") + "\n"
}

/// Ensemble-mean loss and charges per record time.
fn ensemble_mean_csv(e: &Ensemble) -> String {
    let first = &e.trajectories[0];
    let n = e.trajectories.len() as f64;
    let mut out = String::from("time,mean_loss");
    for k in first.charges.keys() {
        out.push_str(&format!(",mean_{k}"));
    }
    out.push('\n');
    for (i, t) in first.times.iter().enumerate() {
        let loss: f64 = e.trajectories.iter().map(|tr| tr.losses[i]).sum::<f64>() / n;
        out.push_str(&format!("{t:e},{loss:e}"));
        for k in first.charges.keys() {
            let m: f64 = e.trajectories.iter().map(|tr| tr.charges[k][i]).sum::<f64>() / n;
            out.push_str(&format!(",{m:e}"));
        }
        out.push('\n');
    }
    out
}

fn sgf_drift(c: &ExperimentConfig, model: &Model, transforms: &[Transformation]) -> Result<RunOutput, CliError> {
    let obj = objective(c, model)?;
    let charged = charges(transforms);
    if charged.is_empty() {
        return Err(CliError::Config("transforms: none of the symmetries has a Noether charge".into()));
    }
    let charge_list: Vec<Charge> = charged.iter().map(|(_, ch)| ch.clone()).collect();
    let d = &c.dynamics;
    let noise = NoiseModel {
        mode: d.noise_mode,
        sigma: d.sigma,
        seed: c.seeds[0],
    };
    let cfg = SgfConfig {
        t_end: d.t_end,
        dt: d.dt,
        ensemble: d.ensemble,
    };
    let ens = sgf(&obj, &initial(c, model), &noise, &cfg, &charge_list).map_err(runtime)?;
    let drift_cfg = DriftConfig {
        theory_path: d.theory_path,
        identity_tol: c.tolerances.drift_identity,
        ..DriftConfig::default()
    };
    let mut out = RunOutput::default();
    for (tname, ch) in &charged {
        let rep = noether_drift_check(&ens, ch, &obj, &drift_cfg).map_err(runtime)?;
        out.reports.extend(rep.reports.into_iter().map(|mut r| {
            r.context.model = model.name.clone();
            r.context.transform = Some(tname.clone());
            r
        }));
    }
    out.files.push(("ensemble.json".into(), ensemble_manifest(&ens)));
    out.files.push(("ensemble_mean.csv".into(), ensemble_mean_csv(&ens)));
    Ok(out)
}

fn stationary(c: &ExperimentConfig, model: &Model, transforms: &[Transformation]) -> Result<RunOutput, CliError> {
    let obj = objective(c, model)?;
    let d = &c.dynamics;
    let traj = gradient_flow(&obj, &initial(c, model), &FlowConfig { t_end: d.t_end, dt: d.dt }, &[])
        .map_err(runtime)?;
    let theta = traj.final_state().expect("flows record their end state");
    let mut out = RunOutput::default();
    out.files.push(("trajectory_flow.csv".into(), traj.to_csv()));
    match stationary_null_count(&obj, transforms, theta, &c.tolerances.stationary) {
        Ok(rep) => {
            let mut spectrum = String::from("index,eigenvalue\n");
            for (i, v) in rep.eigenvalues.iter().enumerate() {
                spectrum.push_str(&format!("{i},{v:e}\n"));
            }
            out.files.push(("spectrum.csv".into(), spectrum));
            out.reports.extend(rep.reports.into_iter().map(|mut r| {
                r.context.seed = Some(c.seeds[0]);
                r
            }));
        }
        Err(equichk::Error::NotConverged { grad_norm, threshold }) => {
            // a flow that did not reach a stationary point is a failed check
            let mut r = IdentityReport::from_norms(
                "stationary_convergence",
                "gradient flow reached a stationary point",
                grad_norm,
                threshold,
                grad_norm,
                1.0,
                threshold,
                context(model, &obj, None, c.seeds[0]),
            );
            r.rel_residual = grad_norm;
            r.pass = false;
            out.reports.push(r);
        }
        Err(e) => return Err(runtime(e)),
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn summary_csv(reports: &[IdentityReport]) -> String {
    let mut out = String::from("index,check_name,model,loss,transform,seed,position,anchor,rel_residual,tolerance,pass\n");
    for (i, r) in reports.iter().enumerate() {
        let ctx = &r.context;
        let fields = [
            i.to_string(),
            csv_field(&r.check_name),
            csv_field(&ctx.model),
            csv_field(&ctx.loss),
            csv_field(ctx.transform.as_deref().unwrap_or("")),
            ctx.seed.map(|s| s.to_string()).unwrap_or_default(),
            ctx.position.map(|p| p.to_string()).unwrap_or_default(),
            csv_field(&r.anchor),
            format!("{:e}", r.rel_residual),
            format!("{:e}", r.tolerance),
            r.pass.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn reports_jsonl(reports: &[IdentityReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("reports serialize"));
        out.push('\n');
    }
    out
}

/// Writes reports, auxiliary files and the manifest. Returns whether every
/// check passed.
pub fn write_outputs(
    dir: &Path,
    loaded: &Loaded,
    output: RunOutput,
    started: SystemTime,
    clock: Instant,
) -> Result<bool, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let write = |name: &str, contents: &str| -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    };
    let mut files = vec!["reports.jsonl".to_string(), "summary.csv".to_string()];
    write("reports.jsonl", &reports_jsonl(&output.reports))?;
    write("summary.csv", &summary_csv(&output.reports))?;
    for (name, contents) in &output.files {
        write(name, contents)?;
        files.push(name.clone());
    }
    let mut checks: BTreeMap<String, CheckCount> = BTreeMap::new();
    for r in &output.reports {
        let e = checks.entry(r.check_name.clone()).or_insert(CheckCount { passed: 0, failed: 0 });
        if r.pass {
            e.passed += 1;
        } else {
            e.failed += 1;
        }
    }
    let passed = output.reports.iter().filter(|r| r.pass).count();
    let failed = output.reports.len() - passed;
    files.push("manifest.json".into());
    let manifest = RunManifest {
        tool: "equichk",
        version: env!("CARGO_PKG_VERSION"),
        experiment: loaded.config.experiment.name(),
        config_digest: format!("sha256:{}", loaded.digest),
        started_unix: started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        passed,
        failed,
        checks,
        files,
    };
    write("manifest.json", &(serde_json::to_string_pretty(&manifest).expect("serializable") + "\n"))?;
    Ok(failed == 0 && !output.reports.is_empty())
}
