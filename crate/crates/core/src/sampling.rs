//! Halton sampling of the state constraint set and supervised dataset
//! generation by solving (Lag)NMPC at each sample.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laguerre::LaguerreBasis;
use crate::mpc::{MpcConfig, MpcSolver, SolveStatus};
use crate::plant::{BoxSet, PlantModel};

/// State constraint set: a box, or a membership predicate with known
/// axis-aligned bounds.
#[derive(Clone)]
pub enum StateSet {
    Box(BoxSet),
    Predicate {
        bounds: BoxSet,
        contains: Arc<dyn Fn(&[f64]) -> bool + Send + Sync>,
    },
}

impl StateSet {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            StateSet::Box(b) => b.contains(x),
            StateSet::Predicate { bounds, contains } => bounds.contains(x) && contains(x),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            StateSet::Box(b) => b.dim(),
            StateSet::Predicate { bounds, .. } => bounds.dim(),
        }
    }
}

/// First `d` primes by trial division.
pub fn primes(d: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(d);
    let mut candidate = 2u64;
    while out.len() < d {
        if (2..candidate).take_while(|p| p * p <= candidate).all(|p| candidate % p != 0) {
            out.push(candidate);
        }
        candidate += 1;
    }
    out
}

/// Base-`p` digit reversal of `n` across the radix point. Computed with
/// integer numerator/denominator arithmetic so the result is platform-exact.
pub fn radical_inverse(p: u64, n: u64) -> f64 {
    debug_assert!(p >= 2);
    let mut num = 0u64;
    let mut den = 1u64;
    let mut n = n;
    while n > 0 {
        num = num * p + n % p;
        den *= p;
        n /= p;
    }
    num as f64 / den as f64
}

/// The `n`-th point of the `d`-dimensional Halton sequence.
pub fn halton_point(d: usize, n: u64) -> Result<Vec<f64>> {
    if d < 1 {
        return Err(Error::InvalidParameter("halton dimension must be >= 1".into()));
    }
    Ok(primes(d).into_iter().map(|p| radical_inverse(p, n)).collect())
}

/// Smallest axis-aligned hypercube containing `set`. For a box this is the
/// box itself; for a predicate set it is the supplied bounds.
pub fn bounding_box(set: &StateSet) -> Result<BoxSet> {
    let b = match set {
        StateSet::Box(b) => b.clone(),
        StateSet::Predicate { bounds, .. } => bounds.clone(),
    };
    // BoxSet construction already rejects unbounded or empty intervals, but a
    // deserialized box may bypass the constructor.
    BoxSet::new(b.lower, b.upper)
}

/// Sample `n_d` states inside `set` with the Halton sequence, skipping index
/// 0 (which maps to the box corner) and rejecting points outside the set.
pub fn halton_sample_states(set: &StateSet, n_d: usize) -> Result<Vec<Vec<f64>>> {
    if n_d < 1 {
        return Err(Error::InvalidParameter("N_d must be >= 1".into()));
    }
    let bounds = bounding_box(set)?;
    let d = bounds.dim();
    let ps = primes(d);
    let mut out = Vec::with_capacity(n_d);
    let cap = 1000 * n_d as u64 + 1000;
    let mut n = 1u64;
    while out.len() < n_d {
        if n > cap {
            return Err(Error::SamplingExhausted(format!(
                "rejection sampling produced {} of {n_d} points after {cap} draws",
                out.len()
            )));
        }
        let x: Vec<f64> = ps
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                bounds.lower[j] + radical_inverse(p, n) * (bounds.upper[j] - bounds.lower[j])
            })
            .collect();
        if set.contains(&x) {
            out.push(x);
        }
        n += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub x: Vec<f64>,
    pub u_star: f64,
    /// Full optimal input sequence of length N.
    pub u_sequence: Vec<f64>,
    /// Optimal Laguerre coefficients, present for LagNMPC datasets.
    pub eta_star: Option<Vec<f64>>,
    pub cost: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Requested sample count N_d.
    pub requested: usize,
    /// Solves attempted (states supplied).
    pub attempted: usize,
    pub horizon: usize,
    pub laguerre_m: Option<usize>,
}

impl Dataset {
    /// Retained feasible count N_s.
    pub fn retained(&self) -> usize {
        self.records.len()
    }
}

/// Solve (Lag)NMPC at every state and keep the converged records, preserving
/// sample order. Solves fan out across the rayon pool; each worker owns its
/// solver instance.
pub fn generate_dataset(
    cfg: &MpcConfig,
    plant: &(impl PlantModel + Sync),
    basis: Option<&LaguerreBasis<f64>>,
    states: &[Vec<f64>],
) -> Result<Dataset> {
    cfg.validate()?;
    let results: Vec<Result<DatasetRecord>> = states
        .par_iter()
        .map(|x| {
            let mut solver = MpcSolver::new(cfg.clone())?;
            let res = match basis {
                Some(b) => solver.solve_lagnmpc(plant, b, x)?,
                None => solver.solve_nmpc(plant, x)?,
            };
            Ok(DatasetRecord {
                x: x.clone(),
                u_star: res.first_input(),
                u_sequence: res.sequence.clone(),
                eta_star: res.eta.clone(),
                cost: res.cost,
                status: res.status,
            })
        })
        .collect();

    let mut records = Vec::with_capacity(states.len());
    for r in results {
        let rec = r?;
        if rec.status == SolveStatus::Converged {
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(
            "no state produced a feasible (Lag)NMPC solution".into(),
        ));
    }
    Ok(Dataset {
        records,
        requested: states.len(),
        attempted: states.len(),
        horizon: cfg.horizon,
        laguerre_m: basis.map(|b| b.size()),
    })
}

fn fmt_float(v: f64) -> String {
    // 17 significant digits round-trip f64 exactly.
    format!("{v:.16e}")
}

/// Write the dataset as delimited text: comment header lines, a column
/// header, then one record per line.
pub fn write_dataset(ds: &Dataset, path: &Path, header_lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header_lines {
        writeln!(f, "# {line}")?;
    }
    writeln!(f, "# requested {}", ds.requested)?;
    writeln!(f, "# retained {}", ds.retained())?;
    writeln!(f, "# horizon {}", ds.horizon)?;
    if let Some(m) = ds.laguerre_m {
        writeln!(f, "# laguerre_m {m}")?;
    }
    let nx = ds.records.first().map_or(2, |r| r.x.len());
    let mut cols: Vec<String> = (1..=nx).map(|i| format!("x{i}")).collect();
    cols.push("u_star".into());
    cols.extend((0..ds.horizon).map(|i| format!("U_star{i}")));
    if let Some(m) = ds.laguerre_m {
        cols.extend((0..m).map(|i| format!("eta_star{i}")));
    }
    cols.push("cost".into());
    cols.push("status".into());
    writeln!(f, "{}", cols.join(","))?;
    for r in &ds.records {
        let mut fields: Vec<String> = r.x.iter().map(|&v| fmt_float(v)).collect();
        fields.push(fmt_float(r.u_star));
        fields.extend(r.u_sequence.iter().map(|&v| fmt_float(v)));
        if let Some(eta) = &r.eta_star {
            fields.extend(eta.iter().map(|&v| fmt_float(v)));
        }
        fields.push(fmt_float(r.cost));
        fields.push(r.status.to_string());
        writeln!(f, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let malformed = |reason: &str| Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut requested = 0usize;
    let mut horizon = 0usize;
    let mut laguerre_m = None;
    let mut header: Option<Vec<String>> = None;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            match (it.next(), it.next()) {
                (Some("requested"), Some(v)) => requested = v.parse().unwrap_or(0),
                (Some("horizon"), Some(v)) => horizon = v.parse().unwrap_or(0),
                (Some("laguerre_m"), Some(v)) => laguerre_m = v.parse().ok(),
                _ => {}
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(line.split(',').map(str::to_string).collect());
            continue;
        }
        let cols = header.as_ref().unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(malformed("row width does not match the column header"));
        }
        let nx = cols.iter().filter(|c| c.starts_with('x')).count();
        let m = laguerre_m.unwrap_or(0);
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| malformed(&format!("bad float {s}")))
        };
        let x = fields[..nx].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
        let u_star = parse(fields[nx])?;
        let useq = fields[nx + 1..nx + 1 + horizon]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<Vec<_>>>()?;
        let eta = if laguerre_m.is_some() {
            Some(
                fields[nx + 1 + horizon..nx + 1 + horizon + m]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let cost = parse(fields[fields.len() - 2])?;
        let status: SolveStatus = fields[fields.len() - 1].parse()?;
        records.push(DatasetRecord {
            x,
            u_star,
            u_sequence: useq,
            eta_star: eta,
            cost,
            status,
        });
    }
    if records.is_empty() {
        return Err(malformed("no data rows"));
    }
    Ok(Dataset {
        requested,
        attempted: requested,
        horizon,
        laguerre_m,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{default_state_box, BuckBoostParams};
    use approx::assert_abs_diff_eq;

    #[test]
    fn radical_inverse_examples() {
        assert_eq!(radical_inverse(2, 0), 0.0);
        assert_eq!(radical_inverse(2, 3), 0.75);
        assert_abs_diff_eq!(radical_inverse(3, 5), 7.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn primes_first_five() {
        assert_eq!(primes(5), vec![2, 3, 5, 7, 11]);
    }

    #[test]
    fn halton_point_examples() {
        let p = halton_point(2, 1).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let p = halton_point(2, 2).unwrap();
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 2.0 / 3.0, epsilon = 1e-15);
        let p = halton_point(1, 4).unwrap();
        assert_eq!(p, vec![0.125]);
        assert!(halton_point(0, 1).is_err());
    }

    #[test]
    fn bounding_box_of_box_is_identity() {
        let b = default_state_box();
        let bb = bounding_box(&StateSet::Box(b.clone())).unwrap();
        assert_eq!(bb, b);
    }

    #[test]
    fn bounding_box_of_predicate_returns_bounds() {
        let bounds = BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let set = StateSet::Predicate {
            bounds: bounds.clone(),
            contains: Arc::new(|x: &[f64]| x[0] * x[0] + x[1] * x[1] <= 1.0),
        };
        assert_eq!(bounding_box(&set).unwrap(), bounds);
    }

    #[test]
    fn halton_states_unit_box() {
        let set = StateSet::Box(BoxSet::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap());
        let xs = halton_sample_states(&set, 2).unwrap();
        assert_abs_diff_eq!(xs[0][0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(xs[0][1], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(xs[1][0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(xs[1][1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn halton_states_table_box_first_point() {
        let set = StateSet::Box(default_state_box());
        let xs = halton_sample_states(&set, 1).unwrap();
        assert_abs_diff_eq!(xs[0][0], 0.01 + 0.5 * 1.99, epsilon = 1e-12);
        assert_abs_diff_eq!(xs[0][1], -20.0 + 20.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn halton_states_respect_predicate() {
        let bounds = BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let set = StateSet::Predicate {
            bounds,
            contains: Arc::new(|x: &[f64]| x[0] + x[1] <= 0.0),
        };
        let xs = halton_sample_states(&set, 100).unwrap();
        assert_eq!(xs.len(), 100);
        for x in xs {
            assert!(x[0] + x[1] <= 0.0);
        }
    }

    #[test]
    fn halton_zero_measure_set_errors() {
        let bounds = BoxSet::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let set = StateSet::Predicate {
            bounds,
            contains: Arc::new(|_: &[f64]| false),
        };
        assert!(matches!(
            halton_sample_states(&set, 3),
            Err(Error::SamplingExhausted(_))
        ));
    }

    #[test]
    fn halton_states_deterministic_and_in_range() {
        let set = StateSet::Box(default_state_box());
        let a = halton_sample_states(&set, 500).unwrap();
        let b = halton_sample_states(&set, 500).unwrap();
        assert_eq!(a, b);
        let bx = default_state_box();
        for x in &a {
            assert!(bx.contains(x));
        }
    }

    #[test]
    fn halton_coverage_of_partition() {
        let set = StateSet::Box(default_state_box());
        let xs = halton_sample_states(&set, 1000).unwrap();
        let b = default_state_box();
        let mut cells = [[0usize; 4]; 4];
        for x in &xs {
            let i = (((x[0] - b.lower[0]) / (b.upper[0] - b.lower[0]) * 4.0) as usize).min(3);
            let j = (((x[1] - b.lower[1]) / (b.upper[1] - b.lower[1]) * 4.0) as usize).min(3);
            cells[i][j] += 1;
        }
        for row in cells {
            for c in row {
                assert!(c >= 1);
            }
        }
    }

    #[test]
    fn dataset_from_equilibrium_state() {
        let plant = BuckBoostParams::default();
        let cfg = MpcConfig::default();
        let basis = cfg.basis().unwrap();
        let (x1, u_ss) = plant.steady_state(-10.0).unwrap();
        let states = vec![vec![x1, -10.0]];
        let ds = generate_dataset(&cfg, &plant, Some(&basis), &states).unwrap();
        assert_eq!(ds.retained(), 1);
        let r = &ds.records[0];
        assert_abs_diff_eq!(r.u_star, u_ss, epsilon = 2e-3);
        let eta = r.eta_star.as_ref().unwrap();
        for &e in eta {
            assert!(e.abs() < 1e-2);
        }
    }

    #[test]
    fn dataset_roundtrips_bitwise() {
        let plant = BuckBoostParams::default();
        let cfg = MpcConfig::default();
        let basis = cfg.basis().unwrap();
        let set = StateSet::Box(default_state_box());
        let states = halton_sample_states(&set, 5).unwrap();
        let ds = generate_dataset(&cfg, &plant, Some(&basis), &states).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        write_dataset(&ds, &path, &["test".into()]).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds.records, back.records);
        assert_eq!(ds.horizon, back.horizon);
        assert_eq!(ds.laguerre_m, back.laguerre_m);
    }
}
