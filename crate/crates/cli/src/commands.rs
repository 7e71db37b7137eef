use std::fmt::Write as _;
use std::path::Path;

use phi_core::bench::{bench_csv, memory_exponent, scale_sweep, BenchError, CountingAllocator, Phase};
use phi_core::datagen::{gen_point_charge_set, split_indices, Split};
use phi_core::md::{energy_drift, drift_csv, masses_of, maxwell_boltzmann, nve_run, trajectory_xyz, MdError, MdState, ModelForceField, Units};
use phi_core::molgraph::{parse_xyz, write_xyz, AtomicSystem};
use phi_core::oracles::verification_suite;
use phi_core::potential::{ForceMode, Model, PotentialError};
use phi_core::tensor::TensorError;
use phi_core::trainer::{
    evaluate, evp_csv, hyper_search, load_checkpoint, metrics_csv, prepare, save_checkpoint, train_run, trials_csv,
    EvalMetrics, TrainError,
};

use crate::config::Config;
use crate::output::{OutDir, CONFIG_ECHO};
use crate::{CliError, Command};

fn potential_error(e: PotentialError) -> CliError {
    match e {
        PotentialError::Tensor(TensorError::NonFinite { .. }) => CliError::Numerical(e.to_string()),
        e => CliError::Validation(e.to_string()),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFinite { .. } | TrainError::Tensor(TensorError::NonFinite { .. }) => {
            CliError::Numerical(e.to_string())
        }
        TrainError::Potential(p) => potential_error(p),
        e => CliError::Validation(e.to_string()),
    }
}

fn md_error(e: MdError) -> CliError {
    match e {
        MdError::NonFinite(_) => CliError::Numerical(e.to_string()),
        MdError::Potential(p) => potential_error(p),
        e => CliError::Validation(e.to_string()),
    }
}

/// Reads `data.path` when set, otherwise generates the synthetic set.
fn dataset(cfg: &Config) -> Result<Vec<AtomicSystem>, CliError> {
    let path = cfg.raw("data.path");
    if path.is_empty() {
        return gen_point_charge_set(&cfg.synthetic_spec()?).map_err(|e| CliError::Validation(e.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("data.path = {path:?}: {e}")))?;
    let systems = parse_xyz(&text).map_err(|e| CliError::Validation(format!("data.path = {path:?}: {e}")))?;
    if systems.is_empty() {
        return Err(CliError::Validation(format!("data.path = {path:?} holds no frames")));
    }
    Ok(systems)
}

fn split(cfg: &Config, n: usize) -> Result<Split, CliError> {
    let (train, val, seed) = cfg.split_fractions()?;
    Ok(split_indices(n, train, val, seed))
}

fn load_model(cfg: &Config, key: &str) -> Result<Model, CliError> {
    let path = cfg.raw(key);
    if path.is_empty() {
        return Err(CliError::Validation(format!("{key} must name a checkpoint file")));
    }
    load_checkpoint(Path::new(path)).map_err(|e| CliError::Validation(format!("{key} = {path:?}: {e}")))
}

fn eval_csv(rows: &[(&str, EvalMetrics)]) -> String {
    let mut out = String::from("split,n,mae,l_pde,net_charge_mean,net_charge_max,es_mean\n");
    for (name, m) in rows {
        let _ = write!(out, "{name},{},{:e}", m.n, m.mae);
        match m.phi {
            Some(p) => {
                let _ = writeln!(
                    out,
                    ",{:e},{:e},{:e},{:e}",
                    p.residual_mean, p.net_charge_mean, p.net_charge_max, p.es_mean
                );
            }
            None => out.push_str(",,,,\n"),
        }
    }
    out
}

fn evaluate_split(cfg: &Config, model: &Model, systems: &[AtomicSystem], idx: &[usize]) -> Result<EvalMetrics, CliError> {
    let train = cfg.train()?;
    let prepared = prepare(model, systems, idx, train.ablation, train.seed).map_err(train_error)?;
    evaluate(model, &prepared, train.batch_size).map_err(train_error)
}

fn gen_data(cfg: &Config, out: &mut OutDir) -> Result<(), CliError> {
    let systems = gen_point_charge_set(&cfg.synthetic_spec()?).map_err(|e| CliError::Validation(e.to_string()))?;
    out.write("dataset.xyz", write_xyz(&systems))?;
    println!("wrote {} molecules to {}", systems.len(), out.path("dataset.xyz").display());
    Ok(())
}

fn train(cfg: &Config, out: &mut OutDir) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let systems = dataset(cfg)?;
    let split = split(cfg, systems.len())?;
    let outcome = train_run(&tc, &systems, &split).map_err(train_error)?;
    out.write("metrics.csv", metrics_csv(&outcome.history))?;
    for (name, model) in [("best.ckpt", &outcome.best_model), ("final.ckpt", &outcome.final_model)] {
        save_checkpoint(model, &out.path(name)).map_err(|e| CliError::Io(e.to_string()))?;
        out.record(name);
    }
    let mut rows = vec![("val", evaluate_split(cfg, &outcome.best_model, &systems, &split.val)?)];
    if !split.test.is_empty() {
        rows.push(("test", evaluate_split(cfg, &outcome.best_model, &systems, &split.test)?));
    }
    out.write("eval.csv", eval_csv(&rows))?;
    println!("best epoch {} val mae {:.6}", outcome.best_epoch, outcome.best_val_mae);
    for (name, m) in &rows {
        println!("{name} mae {:.6} over {} molecules", m.mae, m.n);
    }
    Ok(())
}

fn eval(cfg: &Config, out: &mut OutDir) -> Result<(), CliError> {
    let model = load_model(cfg, "eval.checkpoint")?;
    let systems = dataset(cfg)?;
    let split = split(cfg, systems.len())?;
    let all: Vec<usize> = (0..systems.len()).collect();
    let name = cfg.raw("eval.split");
    let idx = match name {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        "all" => &all,
        other => return Err(CliError::Validation(format!("eval.split = {other:?}: expected train, val, test or all"))),
    };
    let m = evaluate_split(cfg, &model, &systems, idx)?;
    out.write("eval.csv", eval_csv(&[(name, m.clone())]))?;
    println!("{name} mae {:.6} over {} molecules", m.mae, m.n);
    Ok(())
}

fn verify(cfg: &Config, out: &mut OutDir) -> Result<(), CliError> {
    let report = verification_suite(&cfg.suite()?).map_err(|e| CliError::Validation(e.to_string()))?;
    out.write("verify.csv", report.to_csv())?;
    let text = report.to_text();
    out.write("verify.txt", &text)?;
    print!("{text}");
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} checks failed", report.checks.len())));
    }
    Ok(())
}

fn bench(cfg: &Config, out: &mut OutDir, alloc: &CountingAllocator) -> Result<(), CliError> {
    let sweep = cfg.sweep()?;
    let records = scale_sweep(&sweep, alloc).map_err(|e| match e {
        BenchError::Pipeline(m) => CliError::Numerical(m),
        e => CliError::Validation(e.to_string()),
    })?;
    out.write("bench.csv", bench_csv(&records))?;
    for &k in &sweep.k_list {
        for phase in [Phase::Laplacian, Phase::Eigensolve, Phase::Forward] {
            if let Some(s) = memory_exponent(&records, phase, k) {
                println!("k={k} {}: memory-vs-n exponent {s:.3}", phase.name());
            }
        }
    }
    Ok(())
}

fn md(cfg: &Config, out: &mut OutDir) -> Result<(), CliError> {
    let model = load_model(cfg, "md.checkpoint")?;
    let systems = dataset(cfg)?;
    let index: usize = cfg.get("md.molecule")?;
    let sys = systems
        .get(index)
        .ok_or_else(|| CliError::Validation(format!("md.molecule = {index} but the dataset has {} molecules", systems.len())))?;
    let mode = match cfg.raw("md.force_mode") {
        "autodiff" => ForceMode::Autodiff,
        "finite-difference" => ForceMode::FiniteDifference,
        other => {
            return Err(CliError::Validation(format!("md.force_mode = {other:?}: expected autodiff or finite-difference")))
        }
    };
    let steps: usize = cfg.get("md.steps")?;
    let dt: f64 = cfg.get("md.dt")?;
    let stride: usize = cfg.get("md.frame_stride")?;
    let masses = masses_of(&sys.atomic_numbers);
    let velocities = maxwell_boltzmann(&masses, cfg.get("md.temperature")?, cfg.get("md.seed")?);
    let mut ff = ModelForceField::new(&model, sys.atomic_numbers.clone(), mode);
    let mut state =
        MdState::new(sys.positions.clone(), velocities, masses, Units::METAL, &mut ff).map_err(md_error)?;
    let equilibration: usize = cfg.get("md.equilibration_steps")?;
    if equilibration > 0 {
        nve_run(&mut state, &mut ff, equilibration, dt, 0, |_| {}).map_err(md_error)?;
        // The drift window starts at the equilibrated state.
        state.trace.drain(..equilibration);
    }
    let mut frames = vec![state.snapshot(&sys.atomic_numbers)];
    nve_run(&mut state, &mut ff, steps, dt, stride, |s| frames.push(s.snapshot(&sys.atomic_numbers)))
        .map_err(md_error)?;
    out.write("drift.csv", drift_csv(&state.trace))?;
    out.write("trajectory.xyz", trajectory_xyz(&frames))?;
    let report = energy_drift(&state.trace).map_err(md_error)?;
    let kind = if report.absolute { "absolute" } else { "relative" };
    let summary = format!(
        "steps = {steps}\ndt_fs = {dt}\n{kind}_max_drift = {:e}\nslope_per_ps = {:e}\nslope_ci95_per_ps = {:e}\ntrend_is_zero = {}\nfd_fallbacks = {}\n",
        report.max_drift,
        report.slope_per_ps(),
        report.slope_ci95_per_fs * 1000.0,
        report.trend_is_zero(),
        ff.fallbacks
    );
    out.write("drift.txt", &summary)?;
    print!("{summary}");
    Ok(())
}

fn search(cfg: &Config, out: &mut OutDir) -> Result<(), CliError> {
    let base = cfg.train()?;
    let systems = dataset(cfg)?;
    let split = split(cfg, systems.len())?;
    let outcome = hyper_search(
        &base,
        &cfg.search_space()?,
        cfg.get("search.budget")?,
        cfg.get("search.trial_epochs")?,
        cfg.get("search.seed")?,
        &systems,
        &split,
    )
    .map_err(train_error)?;
    out.write("trials.csv", trials_csv(&outcome.trials))?;
    out.write("evp.csv", evp_csv(&outcome.evp))?;
    if let Some(best) = outcome.trials.iter().min_by(|a, b| a.val_mae.total_cmp(&b.val_mae)) {
        println!("best trial {}: k={} beta={:e} gamma={:e} val mae {:.6}", best.index, best.k, best.beta, best.gamma, best.val_mae);
    }
    Ok(())
}

/// Runs one command; every artifact lands in `out_dir` next to the config echo and manifest.
pub fn dispatch(command: Command, cfg: &Config, out_dir: &Path, alloc: &CountingAllocator) -> Result<(), CliError> {
    let mut out = OutDir::create(out_dir)?;
    let name = command_name(command);
    out.write(CONFIG_ECHO, format!("# phi {name}\n{}", cfg.echo()))?;
    match command {
        Command::GenData => gen_data(cfg, &mut out)?,
        Command::Train => train(cfg, &mut out)?,
        Command::Eval => eval(cfg, &mut out)?,
        Command::Verify => verify(cfg, &mut out)?,
        Command::Bench => bench(cfg, &mut out, alloc)?,
        Command::Md => md(cfg, &mut out)?,
        Command::HyperSearch => search(cfg, &mut out)?,
    }
    let manifest = out.finish()?;
    log::info!("manifest written to {}", manifest.display());
    Ok(())
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Verify => "verify",
        Command::Bench => "bench",
        Command::Md => "md",
        Command::HyperSearch => "hyper-search",
    }
}
