//! Library entry points behind the CLI subcommands. Each command validates
//! its inputs, writes deterministic outputs under the config's output
//! directory, and returns the paths it produced.

use std::path::{Path, PathBuf};

use lagnmpc::closed_loop::{simulate, write_trajectory, Controller};
use lagnmpc::error::{Error, Result};
use lagnmpc::evaluation::{control_law_map, write_law_map, write_law_map_svg, GridSpec};
use lagnmpc::fixedpoint::{bench_latency, quantize_net, FixedFormat, QuantizedNet};
use lagnmpc::laguerre::LaguerreBasis;
use lagnmpc::mpc::MpcSolver;
use lagnmpc::nn::{LaguerreHead, Mode, MlpParams, NetworkFile};
use lagnmpc::plant::PlantModel;
use lagnmpc::sampling::{
    generate_dataset, halton_sample_states, read_dataset, write_dataset, StateSet,
};
use lagnmpc::training::{train, write_history, HeadMode};

use crate::config::{controller_kind, ControllerKind, RunConfig};

fn ensure_output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = if cfg.output_dir.as_os_str().is_empty() {
        PathBuf::from("out")
    } else {
        cfg.output_dir.clone()
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataSummary {
    pub path: PathBuf,
    pub requested: usize,
    pub sampled: usize,
    pub retained: usize,
    pub infeasible: usize,
}

/// Sample the constraint set, solve (Lag)NMPC at every state, and write the
/// converged records as the training dataset.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    cfg.validate()?;
    let dir = ensure_output_dir(cfg)?;
    let plant = cfg.plant_params();
    let mpc = cfg.mpc_config()?;
    let states = halton_sample_states(&StateSet::Box(cfg.state_box()?), cfg.sampling.n_d)?;
    let basis = match cfg.train_config()?.head_mode {
        HeadMode::LagNmpc => Some(mpc.basis()?),
        HeadMode::Nmpc => None,
    };
    let ds = generate_dataset(&mpc, &plant, basis.as_ref(), &states)?;
    let path = dir.join("dataset.csv");
    write_dataset(&ds, &path, &cfg.header_lines())?;
    Ok(GenDataSummary {
        path,
        requested: cfg.sampling.n_d,
        sampled: states.len(),
        retained: ds.retained(),
        infeasible: ds.attempted - ds.retained(),
    })
}

/// Train a network on the dataset; writes the weight and history files.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let dir = ensure_output_dir(cfg)?;
    let ds = read_dataset(dataset)?;
    let plant = cfg.plant_params();
    let mpc = cfg.mpc_config()?;
    let tc = cfg.train_config()?;
    let head = match tc.head_mode {
        HeadMode::LagNmpc => {
            let m = ds.laguerre_m.ok_or_else(|| Error::MalformedFile {
                path: dataset.display().to_string(),
                reason: "dataset lacks Laguerre coefficients for a lagnmpc head".into(),
            })?;
            let basis = LaguerreBasis::new(mpc.laguerre_alpha, m, ds.horizon)?;
            Some(LaguerreHead::from_basis(&basis, mpc.u_ss))
        }
        HeadMode::Nmpc => None,
    };
    let bounds = cfg.clamp_bounds();
    let (params, history) = train(&ds, &tc, &plant, &mpc.state_box, &bounds, head.as_ref())?;
    let weight_path = dir.join("weights.json");
    NetworkFile {
        header: cfg.header_lines(),
        params,
        head,
        clamp: bounds,
    }
    .save(&weight_path)?;
    let history_path = dir.join("history.csv");
    write_history(&history, &history_path, &cfg.header_lines())?;
    Ok((weight_path, history_path))
}

fn build_controller(
    cfg: &RunConfig,
    kind: ControllerKind,
    weights: Option<&Path>,
) -> Result<Controller> {
    let mpc = cfg.mpc_config()?;
    match kind {
        ControllerKind::OnlineNmpc => Controller::online_nmpc(mpc),
        ControllerKind::OnlineLagNmpc => Controller::online_lagnmpc(mpc),
        ControllerKind::NnNmpc | ControllerKind::NnLagNmpc => {
            let path = weights.ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "controller {} requires a weight file",
                    kind.slug()
                ))
            })?;
            let file = NetworkFile::load(path)?;
            match kind {
                ControllerKind::NnNmpc => Controller::nn_nmpc(
                    file.params,
                    file.clamp,
                    mpc.x_ss.clone(),
                    mpc.u_ss,
                    cfg.simulate.epsilon,
                ),
                _ => {
                    let head = file.head.ok_or_else(|| Error::MalformedFile {
                        path: path.display().to_string(),
                        reason: "weight file has no Laguerre head".into(),
                    })?;
                    Controller::nn_lagnmpc(
                        file.params,
                        head,
                        file.clamp,
                        mpc.x_ss.clone(),
                        cfg.simulate.epsilon,
                    )
                }
            }
        }
    }
}

/// Evaluate the configured controller over the state grid; writes the map
/// as delimited text and as an SVG heatmap.
pub fn cmd_map(cfg: &RunConfig, weights: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let dir = ensure_output_dir(cfg)?;
    let kind = controller_kind(&cfg.map.controller)?;
    let plant = cfg.plant_params();
    let state_box = cfg.state_box()?;
    let grid = GridSpec::from_box(&state_box, cfg.map.nodes, cfg.map.nodes)?;
    let mut controller = build_controller(cfg, kind, weights)?;
    let map = control_law_map(&plant, &mut controller, &state_box, grid)?;
    let csv = dir.join(format!("map_{}.csv", kind.slug()));
    let svg = dir.join(format!("map_{}.svg", kind.slug()));
    write_law_map(&map, &csv, &cfg.header_lines())?;
    write_law_map_svg(&map, &svg, &format!("u(x), {}", kind.slug()))?;
    Ok((csv, svg))
}

/// Simulate the configured controller from every configured initial state.
pub fn cmd_simulate(cfg: &RunConfig, weights: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = ensure_output_dir(cfg)?;
    let kind = controller_kind(&cfg.simulate.controller)?;
    let plant = cfg.plant_params();
    let state_box = cfg.state_box()?;
    let mut paths = Vec::new();
    for (i, x0) in cfg.simulate.initial_states.iter().enumerate() {
        let mut controller = build_controller(cfg, kind, weights)?;
        let traj = simulate(&plant, &mut controller, &state_box, x0, cfg.simulate.steps)?;
        let path = dir.join(format!("trajectory_{}_{}.csv", kind.slug(), i));
        let mut header = cfg.header_lines();
        header.push(format!("x0 {x0:?}"));
        write_trajectory(&traj, &path, &header)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Fold, quantize, and write the fixed-point weight file plus error report.
pub fn cmd_quantize(cfg: &RunConfig, weights: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let dir = ensure_output_dir(cfg)?;
    let file = NetworkFile::load(weights)?;
    let format = FixedFormat::new(cfg.fixedpoint.frac_bits)?;
    let (qnet, report) = quantize_net(&file.params, file.head.as_ref(), &file.clamp, format)?;
    let qpath = dir.join("weights.q.json");
    qnet.save(&qpath, &cfg.header_lines())?;
    let rpath = dir.join("quantize_report.txt");
    let mut text = String::new();
    for line in cfg.header_lines() {
        text.push_str(&format!("# {line}\n"));
    }
    text.push_str(&format!("frac_bits {}\n", format.frac_bits));
    text.push_str(&format!("parameters {}\n", report.parameters));
    text.push_str(&format!("max_abs_error {:.16e}\n", report.max_abs_error));
    std::fs::write(&rpath, text)?;
    Ok((qpath, rpath))
}

/// Benchmark the integer forward pass over Halton states; writes the report.
pub fn cmd_bench(cfg: &RunConfig, quantized: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = ensure_output_dir(cfg)?;
    let qnet = QuantizedNet::load(quantized)?;
    let states = halton_sample_states(
        &StateSet::Box(cfg.state_box()?),
        cfg.fixedpoint.bench_states,
    )?;
    let quantized_states = states
        .iter()
        .map(|x| qnet.quantize_state(x))
        .collect::<Result<Vec<_>>>()?;
    let stats = bench_latency(&qnet, &quantized_states, cfg.fixedpoint.bench_reps)?;
    let path = dir.join("bench.txt");
    let mut text = String::new();
    for line in cfg.header_lines() {
        text.push_str(&format!("# {line}\n"));
    }
    text.push_str("statistic,value_ns\n");
    text.push_str(&format!("min,{:.1}\n", stats.min_ns));
    text.push_str(&format!("median,{:.1}\n", stats.median_ns));
    text.push_str(&format!("p99,{:.1}\n", stats.p99_ns));
    text.push_str(&format!("evaluations,{}\n", stats.evaluations));
    std::fs::write(&path, text)?;
    Ok(path)
}

/// One verification check: name plus pass/fail.
pub type Check = (String, bool);

/// Fast self-checks of the toolchain under the given config: steady state,
/// basis identities, solver sanity at the equilibrium, gradient oracle, and
/// clamp guarantees.
pub fn cmd_verify(cfg: &RunConfig) -> Result<Vec<Check>> {
    cfg.validate()?;
    let plant = cfg.plant_params();
    let mpc = cfg.mpc_config()?;
    let mut checks = Vec::new();
    let mut push = |name: &str, ok: bool| checks.push((name.to_string(), ok));

    // Steady state: fixed point of the plant map.
    let next = plant.step(&mpc.x_ss, mpc.u_ss);
    let ss_err = next
        .iter()
        .zip(&mpc.x_ss)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    push("steady_state_fixed_point", ss_err <= 1e-9);

    // Laguerre basis: recursion residual and asymptotic orthonormality.
    let basis = mpc.basis()?;
    push("laguerre_basis_builds", basis.size() == mpc.laguerre_m);
    let long = LaguerreBasis::<f64>::new(mpc.laguerre_alpha, mpc.laguerre_m, 2000)?;
    let mut max_dev = 0.0f64;
    for a in 0..long.size() {
        for b in 0..long.size() {
            let dot: f64 = (0..long.horizon())
                .map(|i| long.row(i)[a] * long.row(i)[b])
                .sum();
            let target = if a == b { 1.0 } else { 0.0 };
            max_dev = max_dev.max((dot - target).abs());
        }
    }
    push("laguerre_orthonormality", max_dev <= 1e-6);

    // Solver at the equilibrium returns (nearly) the steady input.
    let mut solver = MpcSolver::new(mpc.clone())?;
    let r = solver.solve_lagnmpc(&plant, &basis, &mpc.x_ss)?;
    push(
        "solver_equilibrium",
        (r.first_input() - mpc.u_ss).abs() <= 1e-4,
    );

    // Plant input gradient against central differences.
    let x = [0.5, -5.0];
    let g = plant.input_gradient(&x);
    let h = 1e-6;
    let up = plant.step(&x, 0.5 + h);
    let dn = plant.step(&x, 0.5 - h);
    let fd: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let g_err = g
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    push("plant_gradient_oracle", g_err <= 1e-5);

    // Clamp guarantee on a fresh network.
    let bounds = cfg.clamp_bounds();
    let mut net = MlpParams::init(2, &[cfg.training.hidden_nodes; 2], 1, cfg.seed);
    let mut ok = true;
    for i in 0..100 {
        let x = [0.01 + 0.02 * i as f64, -0.2 * i as f64];
        let u = net.forward_nmpc(&x, Mode::Infer, &bounds)?;
        ok &= (bounds.u_min..=bounds.u_max).contains(&u);
    }
    push("clamp_guarantee", ok);

    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.output_dir = dir.to_path_buf();
        cfg.sampling.n_d = 12;
        cfg.training.epochs = 3;
        cfg.training.batch_size = 4;
        cfg.training.hidden_nodes = 6;
        cfg.simulate.steps = 5;
        cfg.simulate.controller = "nn-lagnmpc".into();
        cfg.map.nodes = 6;
        cfg.fixedpoint.bench_states = 16;
        cfg.fixedpoint.bench_reps = 100;
        cfg
    }

    #[test]
    fn full_pipeline_runs_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_config(tmp.path());
        let summary = cmd_gen_data(&cfg).unwrap();
        assert!(summary.retained <= summary.requested);
        assert!(summary.path.exists());
        let (weights, history) = cmd_train(&cfg, &summary.path).unwrap();
        assert!(weights.exists() && history.exists());
        let (csv, svg) = cmd_map(&cfg, Some(&weights)).unwrap();
        assert!(csv.exists() && svg.exists());
        let trajs = cmd_simulate(&cfg, Some(&weights)).unwrap();
        assert_eq!(trajs.len(), 2);
        let (qpath, report) = cmd_quantize(&cfg, &weights).unwrap();
        assert!(qpath.exists() && report.exists());
        let bench = cmd_bench(&cfg, &qpath).unwrap();
        let text = std::fs::read_to_string(bench).unwrap();
        assert!(text.contains("median,"));
        // Output files carry the provenance header.
        let head = std::fs::read_to_string(&csv).unwrap();
        assert!(head.starts_with(&format!("# config {}", cfg.hash())));
    }

    #[test]
    fn gen_data_and_train_are_byte_identical_across_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_config(tmp.path());
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let summary = cmd_gen_data(&cfg).unwrap();
            let (weights, history) = cmd_train(&cfg, &summary.path).unwrap();
            outputs.push((
                std::fs::read(&summary.path).unwrap(),
                std::fs::read(&weights).unwrap(),
                std::fs::read(&history).unwrap(),
            ));
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn verify_passes_on_defaults() {
        let checks = cmd_verify(&RunConfig::default()).unwrap();
        assert!(checks.len() >= 5);
        for (name, ok) in checks {
            assert!(ok, "check failed: {name}");
        }
    }

    #[test]
    fn nn_commands_require_weights() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_config(tmp.path());
        assert!(cmd_map(&cfg, None).is_err());
        assert!(cmd_simulate(&cfg, None).is_err());
    }
}
