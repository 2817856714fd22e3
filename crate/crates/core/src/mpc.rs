//! Single-shooting NMPC and Laguerre-parameterized NMPC solvers.
//!
//! Decision variables are the input sequence `U` (NMPC) or the Laguerre
//! coefficients `eta` (LagNMPC). Input box constraints are handled by exact
//! projection for NMPC; for LagNMPC the reconstructed inputs enter a quadratic
//! penalty together with the state box constraints, with the penalty weight
//! increased until the exact violation measured on the rollout drops below the
//! constraint tolerance. The inner solves use a spectral projected gradient
//! iteration with a nonmonotone line search, and gradients are computed by the
//! adjoint recursion over the rollout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laguerre::LaguerreBasis;
use crate::plant::{BoxSet, PlantModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Scaled projected-gradient tolerance for the inner iteration.
    pub stationarity_tol: f64,
    /// Maximum exact constraint violation accepted as feasible.
    pub constraint_tol: f64,
    /// Inner iteration cap per start and penalty stage.
    pub max_iterations: usize,
    /// Number of multi-start initial guesses (first is the steady-state guess).
    pub starts: usize,
    /// Seed for the perturbed starts.
    pub seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            stationarity_tol: 1e-8,
            constraint_tol: 1e-6,
            max_iterations: 500,
            starts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Prediction horizon N.
    pub horizon: usize,
    /// Stage state weight Q, row-major n_x by n_x.
    pub q: Vec<f64>,
    /// Terminal state weight P, row-major n_x by n_x.
    pub p: Vec<f64>,
    /// Input weight R (single input).
    pub r: f64,
    pub x_ss: Vec<f64>,
    pub u_ss: f64,
    pub state_box: BoxSet,
    pub u_min: f64,
    pub u_max: f64,
    /// Laguerre basis size M.
    pub laguerre_m: usize,
    /// Laguerre pole alpha.
    pub laguerre_alpha: f64,
    pub solver: SolverSettings,
}

impl Default for MpcConfig {
    /// Reference tuning for the buck-boost study.
    fn default() -> Self {
        Self {
            horizon: 20,
            q: vec![1.0, 0.0, 0.0, 0.1],
            p: vec![10.0, 0.0, 0.0, 1.0],
            r: 0.7,
            x_ss: vec![0.101, -10.0],
            u_ss: 0.4,
            state_box: crate::plant::default_state_box(),
            u_min: crate::plant::U_MIN,
            u_max: crate::plant::U_MAX,
            laguerre_m: 4,
            laguerre_alpha: 0.9,
            solver: SolverSettings::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let nx = self.x_ss.len();
        if self.horizon < 1 {
            return Err(Error::InvalidParameter("horizon N must be >= 1".into()));
        }
        if self.q.len() != nx * nx || self.p.len() != nx * nx {
            return Err(Error::InvalidParameter(
                "Q and P must be n_x by n_x".into(),
            ));
        }
        for (name, m) in [("Q", &self.q), ("P", &self.p)] {
            for i in 0..nx {
                for j in 0..nx {
                    if (m[i * nx + j] - m[j * nx + i]).abs() > 1e-12 {
                        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
                    }
                }
                if m[i * nx + i] < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "{name} diagonal must be nonnegative"
                    )));
                }
            }
        }
        if self.r <= 0.0 {
            return Err(Error::InvalidParameter("R must be positive".into()));
        }
        if self.state_box.dim() != nx {
            return Err(Error::DimensionMismatch {
                expected: nx,
                got: self.state_box.dim(),
            });
        }
        if !self.state_box.contains(&self.x_ss) || self.state_box.violation(&self.x_ss) > 0.0 {
            return Err(Error::InvalidParameter(
                "x_ss must lie inside the state box".into(),
            ));
        }
        if !(self.u_min < self.u_max) {
            return Err(Error::InvalidParameter("u_min must be below u_max".into()));
        }
        if self.u_ss <= self.u_min || self.u_ss >= self.u_max {
            return Err(Error::InvalidParameter(
                "u_ss must lie strictly inside the input bounds".into(),
            ));
        }
        if self.laguerre_m < 1 || self.laguerre_m > self.horizon {
            return Err(Error::InvalidParameter(
                "laguerre M must satisfy 1 <= M <= N".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.laguerre_alpha) {
            return Err(Error::InvalidParameter("alpha must lie in [0,1)".into()));
        }
        if self.solver.starts < 1 || self.solver.max_iterations < 1 {
            return Err(Error::InvalidParameter(
                "solver needs at least one start and one iteration".into(),
            ));
        }
        Ok(())
    }

    pub fn basis(&self) -> Result<LaguerreBasis<f64>> {
        LaguerreBasis::new(self.laguerre_alpha, self.laguerre_m, self.horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::Infeasible => "infeasible",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SolveStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "converged" => Ok(SolveStatus::Converged),
            "max_iterations" => Ok(SolveStatus::MaxIterations),
            "infeasible" => Ok(SolveStatus::Infeasible),
            other => Err(Error::InvalidParameter(format!("unknown status {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    /// Full input sequence of length N (reconstructed for LagNMPC).
    pub sequence: Vec<f64>,
    /// Laguerre coefficients, present for LagNMPC solves.
    pub eta: Option<Vec<f64>>,
    /// Objective value at `sequence` (no penalty terms).
    pub cost: f64,
    pub status: SolveStatus,
    /// Exact maximum box violation over the rollout states and inputs.
    pub max_violation: f64,
    pub iterations: usize,
}

impl SolveResult {
    pub fn first_input(&self) -> f64 {
        self.sequence[0]
    }
}

/// Forward-simulate the plant over the input sequence. Returns the flat
/// trajectory of N+1 states with stride `n_x`, starting at `x0`.
pub fn rollout(plant: &dyn PlantModel, x0: &[f64], inputs: &[f64]) -> Vec<f64> {
    let nx = plant.state_dim();
    let mut traj = vec![0.0; (inputs.len() + 1) * nx];
    traj[..nx].copy_from_slice(x0);
    for (i, &u) in inputs.iter().enumerate() {
        let (head, tail) = traj.split_at_mut((i + 1) * nx);
        plant.step_into(&head[i * nx..], u, &mut tail[..nx]);
    }
    traj
}

fn quad_form(m: &[f64], d: &[f64]) -> f64 {
    let n = d.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += d[i] * m[i * n + j] * d[j];
        }
    }
    acc
}

/// NMPC objective: terminal `P`-norm plus stage `Q`/`R` terms along the rollout.
pub fn nmpc_cost(cfg: &MpcConfig, plant: &dyn PlantModel, x0: &[f64], inputs: &[f64]) -> f64 {
    let nx = plant.state_dim();
    let traj = rollout(plant, x0, inputs);
    let n = inputs.len();
    let mut cost = 0.0;
    let mut dev = vec![0.0; nx];
    for i in 0..n {
        for j in 0..nx {
            dev[j] = traj[i * nx + j] - cfg.x_ss[j];
        }
        cost += quad_form(&cfg.q, &dev);
        let du = inputs[i] - cfg.u_ss;
        cost += cfg.r * du * du;
    }
    for j in 0..nx {
        dev[j] = traj[n * nx + j] - cfg.x_ss[j];
    }
    cost + quad_form(&cfg.p, &dev)
}

/// LagNMPC objective: identical to `nmpc_cost` at the reconstructed sequence,
/// since `||L_i^T eta||_R^2 = ||u_i - u_ss||_R^2` by construction.
pub fn lagnmpc_cost(
    cfg: &MpcConfig,
    basis: &LaguerreBasis<f64>,
    plant: &dyn PlantModel,
    x0: &[f64],
    eta: &[f64],
) -> Result<f64> {
    let inputs = basis.reconstruct_sequence(eta, cfg.u_ss)?;
    Ok(nmpc_cost(cfg, plant, x0, &inputs))
}

enum Parameterization<'a> {
    Direct,
    Laguerre(&'a LaguerreBasis<f64>),
}

/// Solver instance with per-solve scratch buffers. Not shareable across
/// threads while solving; independent instances may run in parallel.
pub struct MpcSolver {
    cfg: MpcConfig,
    traj: Vec<f64>,
    adjoint: Vec<f64>,
    grad_u: Vec<f64>,
}

const PENALTY_INIT: f64 = 1e2;
const PENALTY_MAX: f64 = 1e10;
const PENALTY_GROWTH: f64 = 10.0;

impl MpcSolver {
    pub fn new(cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        let nx = cfg.x_ss.len();
        let n = cfg.horizon;
        Ok(Self {
            cfg,
            traj: vec![0.0; (n + 1) * nx],
            adjoint: vec![0.0; nx],
            grad_u: vec![0.0; n],
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    /// Solve the plain NMPC problem over the input sequence.
    pub fn solve_nmpc(&mut self, plant: &dyn PlantModel, x0: &[f64]) -> Result<SolveResult> {
        self.check_x0(plant, x0)?;
        let n = self.cfg.horizon;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.solver.seed);
        let mut starts = vec![vec![self.cfg.u_ss; n]];
        for _ in 1..self.cfg.solver.starts {
            starts.push(
                (0..n)
                    .map(|_| rng.gen_range(self.cfg.u_min..self.cfg.u_max))
                    .collect(),
            );
        }
        self.solve_multistart(plant, x0, starts, Parameterization::Direct)
    }

    /// Solve the Laguerre-parameterized problem over the coefficients.
    pub fn solve_lagnmpc(
        &mut self,
        plant: &dyn PlantModel,
        basis: &LaguerreBasis<f64>,
        x0: &[f64],
    ) -> Result<SolveResult> {
        self.solve_lagnmpc_warm(plant, basis, x0, None)
    }

    /// LagNMPC solve with an optional extra warm-start guess (used by the
    /// closed-loop harness to reuse the previous step's coefficients).
    pub fn solve_lagnmpc_warm(
        &mut self,
        plant: &dyn PlantModel,
        basis: &LaguerreBasis<f64>,
        x0: &[f64],
        warm: Option<&[f64]>,
    ) -> Result<SolveResult> {
        self.check_x0(plant, x0)?;
        if basis.horizon() != self.cfg.horizon || basis.size() != self.cfg.laguerre_m {
            return Err(Error::InvalidParameter(
                "basis dimensions do not match the MPC config".into(),
            ));
        }
        let m = basis.size();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.solver.seed);
        let mut starts = vec![vec![0.0; m]];
        if let Some(w) = warm {
            if w.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: w.len(),
                });
            }
            starts.push(w.to_vec());
        }
        while starts.len() < self.cfg.solver.starts + usize::from(warm.is_some()) {
            starts.push((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        self.solve_multistart(plant, x0, starts, Parameterization::Laguerre(basis))
    }

    fn check_x0(&self, plant: &dyn PlantModel, x0: &[f64]) -> Result<()> {
        if x0.len() != plant.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: plant.state_dim(),
                got: x0.len(),
            });
        }
        // Closed-loop operation may hand the solver a state slightly past the
        // box (the penalty only constrains x_1..x_N), so only grossly
        // out-of-domain starts are rejected: beyond 10% of the interval width.
        for (&v, (lo, hi)) in x0
            .iter()
            .zip(self.cfg.state_box.lower.iter().zip(&self.cfg.state_box.upper))
        {
            let slack = 0.1 * (hi - lo);
            if v < lo - slack || v > hi + slack {
                return Err(Error::StateOutsideConstraints(format!("{x0:?}")));
            }
        }
        Ok(())
    }

    fn solve_multistart(
        &mut self,
        plant: &dyn PlantModel,
        x0: &[f64],
        starts: Vec<Vec<f64>>,
        param: Parameterization<'_>,
    ) -> Result<SolveResult> {
        let tol = self.cfg.solver.constraint_tol;
        let mut best: Option<SolveResult> = None;
        for start in starts {
            let cand = self.solve_single(plant, x0, start, &param);
            let better = match &best {
                None => true,
                Some(b) => {
                    let cand_feas = cand.max_violation <= tol;
                    let best_feas = b.max_violation <= tol;
                    match (cand_feas, best_feas) {
                        (true, false) => true,
                        (false, true) => false,
                        (true, true) => cand.cost < b.cost,
                        (false, false) => cand.max_violation < b.max_violation,
                    }
                }
            };
            if better {
                best = Some(cand);
            }
        }
        Ok(best.expect("at least one start"))
    }

    fn solve_single(
        &mut self,
        plant: &dyn PlantModel,
        x0: &[f64],
        mut z: Vec<f64>,
        param: &Parameterization<'_>,
    ) -> SolveResult {
        let settings = self.cfg.solver.clone();
        let mut mu = PENALTY_INIT;
        let mut iterations = 0;
        let stationary = loop {
            let (iters, stat) = self.spg(plant, x0, &mut z, param, mu, settings.max_iterations);
            iterations += iters;
            let viol = self.exact_violation(plant, x0, &z, param);
            if viol <= settings.constraint_tol || mu >= PENALTY_MAX {
                break stat;
            }
            mu *= PENALTY_GROWTH;
        };
        self.finish(plant, x0, z, param, iterations, stationary)
    }

    fn finish(
        &mut self,
        plant: &dyn PlantModel,
        x0: &[f64],
        z: Vec<f64>,
        param: &Parameterization<'_>,
        iterations: usize,
        stationary: bool,
    ) -> SolveResult {
        let (sequence, eta) = match param {
            Parameterization::Direct => (z, None),
            Parameterization::Laguerre(basis) => {
                let seq = basis
                    .reconstruct_sequence(&z, self.cfg.u_ss)
                    .expect("eta length fixed by construction");
                (seq, Some(z))
            }
        };
        let cost = nmpc_cost(&self.cfg, plant, x0, &sequence);
        let max_violation = self.sequence_violation(plant, x0, &sequence);
        let status = if max_violation > self.cfg.solver.constraint_tol {
            SolveStatus::Infeasible
        } else if stationary {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIterations
        };
        SolveResult {
            sequence,
            eta,
            cost,
            status,
            max_violation,
            iterations,
        }
    }

    fn exact_violation(
        &self,
        plant: &dyn PlantModel,
        x0: &[f64],
        z: &[f64],
        param: &Parameterization<'_>,
    ) -> f64 {
        let seq = match param {
            Parameterization::Direct => z.to_vec(),
            Parameterization::Laguerre(basis) => basis
                .reconstruct_sequence(z, self.cfg.u_ss)
                .expect("eta length fixed"),
        };
        self.sequence_violation(plant, x0, &seq)
    }

    /// Max box violation over rollout states x_1..x_N and all inputs.
    fn sequence_violation(&self, plant: &dyn PlantModel, x0: &[f64], seq: &[f64]) -> f64 {
        let nx = plant.state_dim();
        let traj = rollout(plant, x0, seq);
        let mut v: f64 = 0.0;
        for i in 1..=seq.len() {
            v = v.max(self.cfg.state_box.violation(&traj[i * nx..(i + 1) * nx]));
        }
        for &u in seq {
            v = v.max((self.cfg.u_min - u).max(0.0).max(u - self.cfg.u_max));
        }
        v
    }

    /// Penalized objective and its gradient with respect to the decision
    /// variables, via the adjoint recursion over the rollout.
    fn objective_grad(
        &mut self,
        plant: &dyn PlantModel,
        x0: &[f64],
        z: &[f64],
        param: &Parameterization<'_>,
        mu: f64,
        grad: &mut [f64],
    ) -> f64 {
        let nx = plant.state_dim();
        let n = self.cfg.horizon;
        let cfg = &self.cfg;
        let inputs: Vec<f64> = match param {
            Parameterization::Direct => z.to_vec(),
            Parameterization::Laguerre(basis) => {
                (0..n).map(|i| basis.row_dot(i, z) + cfg.u_ss).collect()
            }
        };
        // Forward rollout into scratch.
        self.traj[..nx].copy_from_slice(x0);
        for i in 0..n {
            let (head, tail) = self.traj.split_at_mut((i + 1) * nx);
            plant.step_into(&head[i * nx..], inputs[i], &mut tail[..nx]);
        }

        let viol = |x: &[f64]| -> Vec<f64> {
            x.iter()
                .zip(cfg.state_box.lower.iter().zip(&cfg.state_box.upper))
                .map(|(v, (lo, hi))| (v - hi).max(0.0) + (v - lo).min(0.0))
                .collect()
        };

        let mut cost = 0.0;
        let mut dev = vec![0.0; nx];
        for i in 0..=n {
            let xi = &self.traj[i * nx..(i + 1) * nx];
            for j in 0..nx {
                dev[j] = xi[j] - cfg.x_ss[j];
            }
            cost += if i == n {
                quad_form(&cfg.p, &dev)
            } else {
                quad_form(&cfg.q, &dev)
            };
            if i >= 1 {
                let v = viol(xi);
                cost += mu * v.iter().map(|a| a * a).sum::<f64>();
            }
        }
        let input_penalty = matches!(param, Parameterization::Laguerre(_));
        for &u in &inputs {
            let du = u - cfg.u_ss;
            cost += cfg.r * du * du;
            if input_penalty {
                let vu = (u - cfg.u_max).max(0.0) + (u - cfg.u_min).min(0.0);
                cost += mu * vu * vu;
            }
        }

        // Backward adjoint sweep. lambda holds dJ/dx_{i+1} while processing
        // stage i; state Jacobians come from central differences of the step
        // map (exact for models affine in x).
        let mut lambda = vec![0.0; nx];
        {
            let xn = &self.traj[n * nx..(n + 1) * nx];
            let vn = viol(xn);
            for j in 0..nx {
                let mut acc = 0.0;
                for k in 0..nx {
                    acc += 2.0 * cfg.p[j * nx + k] * (xn[k] - cfg.x_ss[k]);
                }
                lambda[j] = acc + 2.0 * mu * vn[j];
            }
        }
        let mut xp = vec![0.0; nx];
        let mut xm = vec![0.0; nx];
        let mut fp = vec![0.0; nx];
        let mut fm = vec![0.0; nx];
        for i in (0..n).rev() {
            let xi: Vec<f64> = self.traj[i * nx..(i + 1) * nx].to_vec();
            let b = plant.input_gradient(&xi);
            let mut g = 2.0 * cfg.r * (inputs[i] - cfg.u_ss);
            if input_penalty {
                let vu = (inputs[i] - cfg.u_max).max(0.0) + (inputs[i] - cfg.u_min).min(0.0);
                g += 2.0 * mu * vu;
            }
            for j in 0..nx {
                g += b[j] * lambda[j];
            }
            self.grad_u[i] = g;

            if i >= 1 {
                // new_lambda = A^T lambda + stage terms at x_i.
                self.adjoint.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..nx {
                    xp.copy_from_slice(&xi);
                    xm.copy_from_slice(&xi);
                    let h = 1e-6 * (1.0 + xi[j].abs());
                    xp[j] += h;
                    xm[j] -= h;
                    plant.step_into(&xp, inputs[i], &mut fp);
                    plant.step_into(&xm, inputs[i], &mut fm);
                    for k in 0..nx {
                        self.adjoint[j] += (fp[k] - fm[k]) / (2.0 * h) * lambda[k];
                    }
                }
                let vi = viol(&xi);
                for j in 0..nx {
                    let mut acc = 0.0;
                    for k in 0..nx {
                        acc += 2.0 * cfg.q[j * nx + k] * (xi[k] - cfg.x_ss[k]);
                    }
                    lambda[j] = self.adjoint[j] + acc + 2.0 * mu * vi[j];
                }
            }
        }

        match param {
            Parameterization::Direct => grad.copy_from_slice(&self.grad_u),
            Parameterization::Laguerre(basis) => {
                let m = basis.size();
                grad.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    let row = basis.row(i);
                    for j in 0..m {
                        grad[j] += row[j] * self.grad_u[i];
                    }
                }
            }
        }
        cost
    }

    fn objective_only(
        &mut self,
        plant: &dyn PlantModel,
        x0: &[f64],
        z: &[f64],
        param: &Parameterization<'_>,
        mu: f64,
    ) -> f64 {
        // Shares the gradient path; the adjoint sweep is cheap at these sizes.
        let mut scratch = vec![0.0; z.len()];
        self.objective_grad(plant, x0, z, param, mu, &mut scratch)
    }

    fn project(&self, param: &Parameterization<'_>, z: &mut [f64]) {
        if matches!(param, Parameterization::Direct) {
            for u in z.iter_mut() {
                *u = u.clamp(self.cfg.u_min, self.cfg.u_max);
            }
        }
    }

    /// Spectral projected gradient with nonmonotone (Grippo) line search.
    /// Returns (iterations used, stationarity reached).
    fn spg(
        &mut self,
        plant: &dyn PlantModel,
        x0: &[f64],
        z: &mut Vec<f64>,
        param: &Parameterization<'_>,
        mu: f64,
        max_iters: usize,
    ) -> (usize, bool) {
        const MEMORY: usize = 10;
        const GAMMA: f64 = 1e-4;
        const LAMBDA_MIN: f64 = 1e-10;
        const LAMBDA_MAX: f64 = 1e10;

        let dim = z.len();
        self.project(param, z);
        let mut grad = vec![0.0; dim];
        let mut f = self.objective_grad(plant, x0, z, param, mu, &mut grad);
        let mut history = vec![f];
        let mut lambda = 1.0;
        let tol = self.cfg.solver.stationarity_tol;

        for iter in 0..max_iters {
            // Projected-gradient stationarity measure with unit step.
            let mut pg: f64 = 0.0;
            let mut d = vec![0.0; dim];
            for j in 0..dim {
                d[j] = z[j] - grad[j];
            }
            self.project(param, &mut d);
            for j in 0..dim {
                d[j] -= z[j];
                pg = pg.max(d[j].abs());
            }
            if pg <= tol * (1.0 + f.abs()) {
                return (iter, true);
            }

            // Spectral direction.
            let mut dir = vec![0.0; dim];
            for j in 0..dim {
                dir[j] = z[j] - lambda * grad[j];
            }
            self.project(param, &mut dir);
            for j in 0..dim {
                dir[j] -= z[j];
            }
            let gd: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            if gd >= 0.0 {
                // Not a descent direction (can happen right after a penalty
                // bump); fall back to the plain projected gradient.
                for j in 0..dim {
                    dir[j] = d[j];
                }
            }
            let gd: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let f_max = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

            let mut t = 1.0;
            let mut z_new;
            let mut f_new;
            loop {
                z_new = z.iter().zip(&dir).map(|(a, b)| a + t * b).collect::<Vec<_>>();
                f_new = self.objective_only(plant, x0, &z_new, param, mu);
                if f_new <= f_max + GAMMA * t * gd || t < 1e-14 {
                    break;
                }
                t *= 0.5;
            }

            let mut grad_new = vec![0.0; dim];
            f_new = self.objective_grad(plant, x0, &z_new, param, mu, &mut grad_new);
            let mut sty = 0.0;
            let mut sts = 0.0;
            for j in 0..dim {
                let s = z_new[j] - z[j];
                sty += s * (grad_new[j] - grad[j]);
                sts += s * s;
            }
            lambda = if sty > 0.0 {
                (sts / sty).clamp(LAMBDA_MIN, LAMBDA_MAX)
            } else {
                LAMBDA_MAX
            };
            *z = z_new;
            grad = grad_new;
            f = f_new;
            history.push(f);
            if history.len() > MEMORY {
                history.remove(0);
            }
        }
        (max_iters, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::BuckBoostParams;
    use approx::assert_abs_diff_eq;

    fn setup() -> (MpcConfig, BuckBoostParams) {
        (MpcConfig::default(), BuckBoostParams::default())
    }

    #[test]
    fn config_default_validates() {
        let (cfg, _) = setup();
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_zero_horizon() {
        let (mut cfg, _) = setup();
        cfg.horizon = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rollout_holds_equilibrium() {
        let (cfg, plant) = setup();
        let (x1, u) = plant.steady_state(-10.0).unwrap();
        let x0 = [x1, -10.0];
        let traj = rollout(&plant, &x0, &vec![u; cfg.horizon]);
        for i in 0..=cfg.horizon {
            assert_abs_diff_eq!(traj[2 * i], x1, epsilon = 1e-9);
            assert_abs_diff_eq!(traj[2 * i + 1], -10.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rollout_first_step_matches_plant() {
        let (_, plant) = setup();
        let traj = rollout(&plant, &[0.0, 0.0], &[0.4, 0.1, 0.8]);
        assert_abs_diff_eq!(traj[2], 0.142857, epsilon = 1e-6);
        assert_abs_diff_eq!(traj[3], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cost_zero_at_equilibrium() {
        let (mut cfg, plant) = setup();
        let (x1, u) = plant.steady_state(-10.0).unwrap();
        cfg.x_ss = vec![x1, -10.0];
        cfg.u_ss = u;
        let cost = nmpc_cost(&cfg, &plant, &[x1, -10.0], &vec![u; cfg.horizon]);
        assert_abs_diff_eq!(cost, 0.0, epsilon = 1e-18);
    }

    #[test]
    fn cost_single_stage_expansion() {
        let (mut cfg, plant) = setup();
        cfg.horizon = 1;
        cfg.laguerre_m = 1;
        cfg.q = vec![1.0, 0.0, 0.0, 1.0];
        cfg.p = vec![1.0, 0.0, 0.0, 1.0];
        cfg.r = 1.0;
        let (x1, u_ss) = plant.steady_state(-10.0).unwrap();
        cfg.x_ss = vec![x1, -10.0];
        cfg.u_ss = u_ss;
        let x0 = [x1, -10.0];
        // u_ss + 1 exceeds the physical duty bounds but the cost is total.
        let u = u_ss + 1.0;
        let xn = plant.step(&x0, u);
        let expected =
            1.0 + (xn[0] - x1).powi(2) + (xn[1] - (-10.0)).powi(2);
        assert_abs_diff_eq!(nmpc_cost(&cfg, &plant, &x0, &[u]), expected, epsilon = 1e-12);
    }

    #[test]
    fn cost_homogeneous_in_weights() {
        let (mut cfg, plant) = setup();
        let x0 = [0.5, -5.0];
        let us: Vec<f64> = (0..cfg.horizon).map(|i| 0.2 + 0.03 * i as f64).collect();
        let c1 = nmpc_cost(&cfg, &plant, &x0, &us);
        cfg.q.iter_mut().for_each(|v| *v *= 2.0);
        cfg.p.iter_mut().for_each(|v| *v *= 2.0);
        cfg.r *= 2.0;
        let c2 = nmpc_cost(&cfg, &plant, &x0, &us);
        assert_abs_diff_eq!(c2, 2.0 * c1, epsilon = 1e-9 * c1.abs().max(1.0));
    }

    #[test]
    fn lagnmpc_cost_matches_reconstruction() {
        let (cfg, plant) = setup();
        let basis = cfg.basis().unwrap();
        let eta = [0.3, -0.2, 0.05, 0.01];
        let x0 = [0.8, -14.0];
        let via_param = lagnmpc_cost(&cfg, &basis, &plant, &x0, &eta).unwrap();
        let seq = basis.reconstruct_sequence(&eta, cfg.u_ss).unwrap();
        let direct = nmpc_cost(&cfg, &plant, &x0, &seq);
        assert_abs_diff_eq!(via_param, direct, epsilon = 1e-10);
    }

    #[test]
    fn lagnmpc_cost_zero_at_equilibrium() {
        let (mut cfg, plant) = setup();
        let (x1, u) = plant.steady_state(-10.0).unwrap();
        cfg.x_ss = vec![x1, -10.0];
        cfg.u_ss = u;
        let basis = cfg.basis().unwrap();
        let c = lagnmpc_cost(&cfg, &basis, &plant, &[x1, -10.0], &[0.0; 4]).unwrap();
        assert_abs_diff_eq!(c, 0.0, epsilon = 1e-18);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let (cfg, plant) = setup();
        let mut solver = MpcSolver::new(cfg.clone()).unwrap();
        let x0 = [0.4, -6.0];
        let us: Vec<f64> = (0..cfg.horizon).map(|i| 0.3 + 0.02 * (i % 5) as f64).collect();
        let mu = 1e3;
        let mut grad = vec![0.0; cfg.horizon];
        solver.objective_grad(&plant, &x0, &us, &Parameterization::Direct, mu, &mut grad);
        let h = 1e-7;
        for j in [0, 5, 19] {
            let mut up = us.clone();
            let mut dn = us.clone();
            up[j] += h;
            dn[j] -= h;
            let fp = solver.objective_only(&plant, &x0, &up, &Parameterization::Direct, mu);
            let fm = solver.objective_only(&plant, &x0, &dn, &Parameterization::Direct, mu);
            let fd = (fp - fm) / (2.0 * h);
            let scale = grad[j].abs().max(1.0);
            assert!(
                ((fd - grad[j]) / scale).abs() < 1e-6,
                "grad[{j}] fd {fd} adjoint {}",
                grad[j]
            );
        }
    }

    #[test]
    fn solve_nmpc_at_equilibrium() {
        let (mut cfg, plant) = setup();
        let (x1, u) = plant.steady_state(-10.0).unwrap();
        cfg.x_ss = vec![x1, -10.0];
        cfg.u_ss = u;
        let mut solver = MpcSolver::new(cfg).unwrap();
        let res = solver.solve_nmpc(&plant, &[x1, -10.0]).unwrap();
        assert!(res.cost <= 1e-6, "cost {}", res.cost);
        assert_eq!(res.status, SolveStatus::Converged);
        for &ui in &res.sequence {
            assert_abs_diff_eq!(ui, u, epsilon = 1e-3);
        }
    }

    #[test]
    fn solve_lagnmpc_at_equilibrium() {
        let (mut cfg, plant) = setup();
        let (x1, u) = plant.steady_state(-10.0).unwrap();
        cfg.x_ss = vec![x1, -10.0];
        cfg.u_ss = u;
        let basis = cfg.basis().unwrap();
        let mut solver = MpcSolver::new(cfg).unwrap();
        let res = solver.solve_lagnmpc(&plant, &basis, &[x1, -10.0]).unwrap();
        let eta = res.eta.as_ref().unwrap();
        let norm: f64 = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-4, "eta norm {norm}");
        assert!(res.cost <= 1e-6);
    }

    #[test]
    fn solve_rejects_state_outside_box() {
        let (cfg, plant) = setup();
        let mut solver = MpcSolver::new(cfg).unwrap();
        let err = solver.solve_nmpc(&plant, &[3.0, -10.0]).unwrap_err();
        assert!(matches!(err, Error::StateOutsideConstraints(_)));
    }

    #[test]
    fn solve_nmpc_matches_tighter_oracle() {
        // Oracle: same contract realized with a dense random-restart solve at
        // 10x tighter tolerances.
        let (cfg, plant) = setup();
        let x0 = [0.01, 0.0];
        let mut solver = MpcSolver::new(cfg.clone()).unwrap();
        let res = solver.solve_nmpc(&plant, &x0).unwrap();

        let mut oracle_cfg = cfg;
        oracle_cfg.solver.starts = 50;
        oracle_cfg.solver.stationarity_tol = 1e-9;
        oracle_cfg.solver.constraint_tol = 1e-7;
        oracle_cfg.solver.max_iterations = 2000;
        oracle_cfg.solver.seed = 12345;
        let mut oracle = MpcSolver::new(oracle_cfg).unwrap();
        let reference = oracle.solve_nmpc(&plant, &x0).unwrap();

        assert!(
            (res.first_input() - reference.first_input()).abs() <= 1e-3,
            "main {} oracle {}",
            res.first_input(),
            reference.first_input()
        );
    }

    #[test]
    fn solve_respects_state_constraints_at_boundary() {
        let (cfg, plant) = setup();
        let tol = cfg.solver.constraint_tol;
        let mut solver = MpcSolver::new(cfg).unwrap();
        // x2 at its upper bound.
        let res = solver.solve_nmpc(&plant, &[0.3, 0.0]).unwrap();
        assert!(res.max_violation <= tol, "violation {}", res.max_violation);
    }

    #[test]
    fn solve_lagnmpc_from_corner_is_feasible() {
        let (cfg, plant) = setup();
        let basis = cfg.basis().unwrap();
        let mut solver = MpcSolver::new(cfg).unwrap();
        let res = solver.solve_lagnmpc(&plant, &basis, &[0.5, -19.0]).unwrap();
        assert_ne!(res.status, SolveStatus::Infeasible);
        let u0 = res.first_input();
        assert!((0.1..=0.9).contains(&u0), "u0 {u0}");
    }

    #[test]
    fn reported_cost_self_consistent() {
        let (cfg, plant) = setup();
        let mut solver = MpcSolver::new(cfg.clone()).unwrap();
        let res = solver.solve_nmpc(&plant, &[0.7, -15.0]).unwrap();
        let recomputed = nmpc_cost(&cfg, &plant, &[0.7, -15.0], &res.sequence);
        assert_abs_diff_eq!(res.cost, recomputed, epsilon = 1e-9);
    }

    #[test]
    fn solver_is_deterministic() {
        let (cfg, plant) = setup();
        let x0 = [0.9, -4.0];
        let mut s1 = MpcSolver::new(cfg.clone()).unwrap();
        let mut s2 = MpcSolver::new(cfg).unwrap();
        let r1 = s1.solve_nmpc(&plant, &x0).unwrap();
        let r2 = s2.solve_nmpc(&plant, &x0).unwrap();
        assert_eq!(r1, r2);
    }
}
