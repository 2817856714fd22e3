//! Control-law maps: the policy evaluated over a grid of the state box,
//! with one-step constraint-violation bookkeeping per bound.
//!
//! A map answers "what input does the policy command at each admissible
//! state, and does applying it keep the successor state in the box". The
//! per-bound flags let callers count, e.g., nodes whose successor breaks the
//! inductor-current bounds specifically.

use serde::{Deserialize, Serialize};

use crate::closed_loop::Controller;
use crate::error::{Error, Result};
use crate::plant::{BoxSet, PlantModel};

pub const DEFAULT_GRID_NODES: usize = 100;

/// An inclusive rectangular grid over a two-dimensional state box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub n1: usize,
    pub n2: usize,
}

impl GridSpec {
    pub fn from_box(state_box: &BoxSet, n1: usize, n2: usize) -> Result<Self> {
        if state_box.dim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: state_box.dim(),
            });
        }
        if n1 < 2 || n2 < 2 {
            return Err(Error::InvalidParameter(
                "grid needs at least two nodes per axis".into(),
            ));
        }
        Ok(Self {
            x1_min: state_box.lower[0],
            x1_max: state_box.upper[0],
            x2_min: state_box.lower[1],
            x2_max: state_box.upper[1],
            n1,
            n2,
        })
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node (i, j), i along x1 and j along x2, endpoints inclusive.
    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let t1 = i as f64 / (self.n1 - 1) as f64;
        let t2 = j as f64 / (self.n2 - 1) as f64;
        [
            self.x1_min + t1 * (self.x1_max - self.x1_min),
            self.x2_min + t2 * (self.x2_max - self.x2_min),
        ]
    }

    /// Flat index of node (i, j): row-major with i fastest.
    pub fn flat(&self, i: usize, j: usize) -> usize {
        j * self.n1 + i
    }
}

/// Per-node bound-violation flags for the one-step successor state, packed
/// per state dimension as bit 0 = lower, bit 1 = upper.
pub type ViolationMask = u8;

pub const X1_LOWER: ViolationMask = 1 << 0;
pub const X1_UPPER: ViolationMask = 1 << 1;
pub const X2_LOWER: ViolationMask = 1 << 2;
pub const X2_UPPER: ViolationMask = 1 << 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawMap {
    pub grid: GridSpec,
    /// Commanded input at each node, flat per `GridSpec::flat`.
    pub u: Vec<f64>,
    pub violations: Vec<ViolationMask>,
    /// False where an online solve did not converge; always true for networks.
    pub feasible: Vec<bool>,
    pub u_min: f64,
    pub u_max: f64,
}

fn violation_mask(state_box: &BoxSet, x: &[f64]) -> ViolationMask {
    let mut mask = 0;
    for (j, (&v, (lo, hi))) in x
        .iter()
        .zip(state_box.lower.iter().zip(&state_box.upper))
        .enumerate()
    {
        if v < *lo {
            mask |= 1 << (2 * j);
        }
        if v > *hi {
            mask |= 1 << (2 * j + 1);
        }
    }
    mask
}

impl LawMap {
    /// Nodes whose successor violates either bound of state `dim`.
    pub fn violation_count(&self, dim: usize) -> usize {
        let sel = (1 << (2 * dim)) | (1 << (2 * dim + 1));
        self.violations.iter().filter(|&&m| m & sel != 0).count()
    }

    /// Nodes whose successor violates any state bound.
    pub fn total_violation_count(&self) -> usize {
        self.violations.iter().filter(|&&m| m != 0).count()
    }
}

/// Evaluate the policy (offset-free correction disabled) at every grid node
/// and record the one-step violation flags of each commanded input.
pub fn control_law_map(
    plant: &dyn PlantModel,
    controller: &mut Controller,
    state_box: &BoxSet,
    grid: GridSpec,
) -> Result<LawMap> {
    let bounds = controller.clamp_bounds();
    let mut u = vec![0.0; grid.len()];
    let mut violations = vec![0; grid.len()];
    let mut feasible = vec![true; grid.len()];
    for j in 0..grid.n2 {
        for i in 0..grid.n1 {
            let x = grid.node(i, j);
            let k = grid.flat(i, j);
            match controller.raw_input(plant, &x) {
                Ok(v) => {
                    u[k] = v;
                    let next = plant.step(&x, v);
                    violations[k] = violation_mask(state_box, &next);
                }
                Err(Error::StateOutsideConstraints(_)) => {
                    feasible[k] = false;
                    u[k] = f64::NAN;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(LawMap {
        grid,
        u,
        violations,
        feasible,
        u_min: bounds.u_min,
        u_max: bounds.u_max,
    })
}

/// Write the map as delimited text, one node per row.
pub fn write_law_map(map: &LawMap, path: &std::path::Path, header_lines: &[String]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header_lines {
        writeln!(f, "# {line}")?;
    }
    writeln!(f, "# n1 {}", map.grid.n1)?;
    writeln!(f, "# n2 {}", map.grid.n2)?;
    writeln!(f, "x1,x2,u,violation_mask,feasible")?;
    for j in 0..map.grid.n2 {
        for i in 0..map.grid.n1 {
            let x = map.grid.node(i, j);
            let k = map.grid.flat(i, j);
            writeln!(
                f,
                "{:.16e},{:.16e},{:.16e},{},{}",
                x[0], x[1], map.u[k], map.violations[k], map.feasible[k] as u8
            )?;
        }
    }
    Ok(())
}

/// Map an input value to an RGB color: blue at `u_min` through white to red
/// at `u_max`, clamped to that range.
pub fn heat_color(u: f64, u_min: f64, u_max: f64) -> (u8, u8, u8) {
    if u.is_nan() {
        return (128, 128, 128);
    }
    let t = ((u - u_min) / (u_max - u_min)).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t).round() as u8;
    if t < 0.5 {
        let s = t / 0.5;
        (lerp(0.0, 255.0, s), lerp(0.0, 255.0, s), 255)
    } else {
        let s = (t - 0.5) / 0.5;
        (255, lerp(255.0, 0.0, s), lerp(255.0, 0.0, s))
    }
}

/// Render the map as a standalone SVG heatmap. Violating nodes get a black
/// outline; infeasible nodes are grey.
pub fn write_law_map_svg(
    map: &LawMap,
    path: &std::path::Path,
    title: &str,
) -> Result<()> {
    use std::fmt::Write as _;
    use std::io::Write as _;
    let cell = 6.0;
    let margin = 40.0;
    let w = map.grid.n1 as f64 * cell + 2.0 * margin;
    let h = map.grid.n2 as f64 * cell + 2.0 * margin;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .ok();
    writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#,
        w / 2.0
    )
    .ok();
    for j in 0..map.grid.n2 {
        for i in 0..map.grid.n1 {
            let k = map.grid.flat(i, j);
            let (r, g, b) = if map.feasible[k] {
                heat_color(map.u[k], map.u_min, map.u_max)
            } else {
                (128, 128, 128)
            };
            // SVG y grows downward; draw j = 0 (x2 minimum) at the bottom.
            let px = margin + i as f64 * cell;
            let py = margin + (map.grid.n2 - 1 - j) as f64 * cell;
            let stroke = if map.violations[k] != 0 {
                r#" stroke="black" stroke-width="1""#
            } else {
                ""
            };
            writeln!(
                svg,
                r##"<rect x="{px}" y="{py}" width="{cell}" height="{cell}" fill="#{r:02x}{g:02x}{b:02x}"{stroke}/>"##
            )
            .ok();
        }
    }
    let labels = [
        (margin, h - 8.0, format!("x1 in [{}, {}]", map.grid.x1_min, map.grid.x1_max)),
        (margin, 32.0, format!("x2 in [{}, {}]", map.grid.x2_min, map.grid.x2_max)),
    ];
    for (x, y, text) in labels {
        writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="11">{text}</text>"#
        )
        .ok();
    }
    writeln!(svg, "</svg>").ok();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(svg.as_bytes())?;
    Ok(())
}
