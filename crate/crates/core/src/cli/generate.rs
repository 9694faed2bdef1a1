//! Pseudo-orbits with a prescribed weighted defect, and their CSV form.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Base, GenerateSpec, Perturbation, PerturbationKind};
use super::output::fmt_f64;
use crate::error::{Error, Result};
use crate::rates::fd_step;
use crate::shadow_continuous::{ContinuousPseudoOrbit, ContinuousSystem};
use crate::shadow_discrete::{weighted_defect, DiscreteSystem, PseudoOrbit};

const DEFAULT_IMPULSE_INDEX: usize = 5;
const RK4_SUBSTEPS: usize = 16;
const NOISE_MODES: usize = 8;
const FIT_ITERATIONS: usize = 40;

fn x0(spec: &GenerateSpec, dim: usize) -> Result<DVector<f64>> {
    match &spec.x0 {
        None => Ok(DVector::zeros(dim)),
        Some(v) if v.len() == dim => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::Config(format!("x0 has {} entries, system dimension is {dim}", v.len()))),
    }
}

fn unit(dim: usize, norm: crate::linalg::Norm) -> DVector<f64> {
    let ones = DVector::from_element(dim, 1.0);
    &ones / norm.vector(&ones)
}

/// Scale `s` with `defect(s) = target` by secant steps from `s = target`.
fn fit_scale(target: f64, mut defect: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (mut s0, mut d0) = (0.0, defect(0.0)?);
    let mut s1 = target;
    let mut d1 = defect(s1)?;
    for _ in 0..FIT_ITERATIONS {
        if (d1 - target).abs() <= 1e-12 * target || d1 == d0 {
            break;
        }
        let s2 = s1 + (target - d1) * (s1 - s0) / (d1 - d0);
        (s0, d0) = (s1, d1);
        s1 = s2;
        d1 = defect(s1)?;
    }
    if d1 == 0.0 {
        return Err(Error::Config("perturbation has no effect on the defect".into()));
    }
    Ok(s1)
}

/// Discrete pseudo-orbit: the exact orbit from `x0` plus a perturbation of the states.
pub fn discrete_pseudo_orbit(sys: &DiscreteSystem, spec: &GenerateSpec) -> Result<PseudoOrbit> {
    if spec.base == Base::Integrated {
        return Err(Error::Config("base `integrated` needs a continuous system".into()));
    }
    let big_n = sys.horizon();
    let mut x = vec![x0(spec, sys.dim())?];
    for n in 0..big_n {
        let next = sys.step(n, &x[n]);
        x.push(next);
    }
    let Some(p) = &spec.perturbation else {
        return PseudoOrbit::new(x, sys);
    };
    let shape = discrete_shape(sys, p)?;
    let build = |s: f64| -> Vec<DVector<f64>> { x.iter().zip(&shape).map(|(x, e)| x + e * s).collect() };
    let s = fit_scale(p.magnitude, |s| Ok(weighted_defect(&build(s), sys)?.0))?;
    PseudoOrbit::new(build(s), sys)
}

fn discrete_shape(sys: &DiscreteSystem, p: &Perturbation) -> Result<Vec<DVector<f64>>> {
    let (dim, big_n) = (sys.dim(), sys.horizon());
    let mut shape = vec![DVector::zeros(dim); big_n + 1];
    match p.kind {
        PerturbationKind::Impulse => {
            let k = p.index.unwrap_or(DEFAULT_IMPULSE_INDEX.min(big_n));
            if k > big_n {
                return Err(Error::Config(format!("impulse index {k} beyond horizon {big_n}")));
            }
            shape[k] = unit(dim, sys.linear.norm());
        }
        PerturbationKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed.expect("validated"));
            for (n, e) in shape.iter_mut().enumerate() {
                let w = sys.weight(n.min(big_n - 1));
                *e = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0)) * w;
            }
        }
    }
    Ok(shape)
}

/// Grid for a generated continuous pseudo-orbit.
pub fn continuous_grid(spec: &GenerateSpec, default: Option<(f64, f64)>, t_max: f64) -> Result<Vec<f64>> {
    let (dt_max, dh) = default.unwrap_or((t_max, t_max / 400.0));
    let (t_end, h) = (spec.t_max.unwrap_or(dt_max), spec.step.unwrap_or(dh));
    if !(h > 0.0 && t_end > 0.0 && t_end <= t_max) {
        return Err(Error::Config(format!("continuous grid needs 0 < step and 0 < t_max <= {t_max}")));
    }
    Ok(crate::examples::uniform_grid(t_end, h))
}

fn rk4_path(sys: &ContinuousSystem, grid: &[f64], x0: DVector<f64>) -> Vec<DVector<f64>> {
    let mut out = vec![x0];
    for w in grid.windows(2) {
        let h = (w[1] - w[0]) / RK4_SUBSTEPS as f64;
        let mut x = out[out.len() - 1].clone();
        for j in 0..RK4_SUBSTEPS {
            let t = w[0] + h * j as f64;
            let k1 = sys.rhs(t, &x);
            let k2 = sys.rhs(t + h / 2.0, &(&x + &k1 * (h / 2.0)));
            let k3 = sys.rhs(t + h / 2.0, &(&x + &k2 * (h / 2.0)));
            let k4 = sys.rhs(t + h, &(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        out.push(x);
    }
    out
}

fn euler_path(sys: &ContinuousSystem, grid: &[f64], x0: DVector<f64>) -> Vec<DVector<f64>> {
    let mut out = vec![x0];
    for w in grid.windows(2) {
        let x = &out[out.len() - 1];
        let next = x + sys.rhs(w[0], x) * (w[1] - w[0]);
        out.push(next);
    }
    out
}

type Samples = Vec<DVector<f64>>;

/// Smooth perturbation `p(t)` and its derivative on the grid.
fn continuous_shape(sys: &ContinuousSystem, grid: &[f64], p: &Perturbation) -> Result<(Samples, Samples)> {
    let dim = sys.dim();
    match p.kind {
        PerturbationKind::Impulse => {
            let k = p.index.unwrap_or(DEFAULT_IMPULSE_INDEX);
            let Some(&center) = grid.get(k) else {
                return Err(Error::Config(format!("impulse index {k} beyond the grid ({} nodes)", grid.len())));
            };
            let width = 4.0 * (grid[1] - grid[0]);
            let u = unit(dim, sys.linear.norm());
            let (mut v, mut dv) = (Vec::new(), Vec::new());
            for &t in grid {
                let s = (t - center) / width;
                let b = (-s * s).exp();
                v.push(&u * b);
                dv.push(&u * (-2.0 * s / width * b));
            }
            Ok((v, dv))
        }
        PerturbationKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed.expect("validated"));
            let modes: Vec<(DVector<f64>, f64, f64)> = (0..NOISE_MODES)
                .map(|_| {
                    let a = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0));
                    (a, rng.random_range(0.2..2.0), rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            let (mut v, mut dv) = (Vec::new(), Vec::new());
            for &t in grid {
                let w = sys.weight(t);
                let e = fd_step(t);
                let lo = (t - e).max(0.0);
                let dw = (sys.weight(t + e) - sys.weight(lo)) / (t + e - lo);
                let (mut m, mut dm) = (DVector::zeros(dim), DVector::zeros(dim));
                for (a, om, ph) in &modes {
                    m += a * (om * t + ph).sin();
                    dm += a * (om * (om * t + ph).cos());
                }
                v.push(&m * w);
                dv.push(dm * w + m * dw);
            }
            Ok((v, dv))
        }
    }
}

/// Continuous pseudo-orbit on `grid`. Exact bases carry their derivative, integrated bases are
/// differentiated numerically.
pub fn continuous_pseudo_orbit(
    sys: &ContinuousSystem,
    grid: Vec<f64>,
    spec: &GenerateSpec,
) -> Result<ContinuousPseudoOrbit> {
    let start = x0(spec, sys.dim())?;
    let (x, dx) = match spec.base {
        Base::Exact => {
            let x = rk4_path(sys, &grid, start);
            let dx: Vec<DVector<f64>> = grid.iter().zip(&x).map(|(&t, x)| sys.rhs(t, x)).collect();
            (x, Some(dx))
        }
        Base::Integrated => (euler_path(sys, &grid, start), None),
    };
    let Some(p) = &spec.perturbation else {
        return ContinuousPseudoOrbit::new(grid, x, dx, sys);
    };
    let (shape, dshape) = continuous_shape(sys, &grid, p)?;
    let build = |s: f64| -> Result<ContinuousPseudoOrbit> {
        let y = x.iter().zip(&shape).map(|(x, e)| x + e * s).collect();
        let dy = dx.as_ref().map(|dx| dx.iter().zip(&dshape).map(|(d, e)| d + e * s).collect());
        ContinuousPseudoOrbit::new(grid.clone(), y, dy, sys)
    };
    let s = fit_scale(p.magnitude, |s| Ok(build(s)?.delta))?;
    build(s)
}

/// `# delta = ..`, a header row, then one row per node. Continuous files carry `yp*` columns
/// when the derivative is known.
pub fn pseudo_orbit_csv(
    times: &[f64],
    y: &[DVector<f64>],
    y_prime: Option<&[DVector<f64>]>,
    delta: f64,
    discrete: bool,
) -> String {
    let dim = y.first().map_or(0, |v| v.len());
    let mut out = format!("# delta = {}\n", fmt_f64(delta));
    let mut header = vec![if discrete { "n".to_string() } else { "t".to_string() }];
    header.extend((0..dim).map(|i| format!("y{i}")));
    if y_prime.is_some() {
        header.extend((0..dim).map(|i| format!("yp{i}")));
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for (k, (t, v)) in times.iter().zip(y).enumerate() {
        let mut row = vec![if discrete { k.to_string() } else { fmt_f64(*t) }];
        row.extend(v.iter().map(|x| fmt_f64(*x)));
        if let Some(p) = y_prime {
            row.extend(p[k].iter().map(|x| fmt_f64(*x)));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parsed pseudo-orbit file: node times, states and optional derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitFile {
    pub discrete: bool,
    pub times: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub y_prime: Option<Vec<DVector<f64>>>,
}

pub fn read_pseudo_orbit(path: &Path) -> Result<OrbitFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read pseudo-orbit {}: {e}", path.display())))?;
    parse_pseudo_orbit(&text)
}

pub fn parse_pseudo_orbit(text: &str) -> Result<OrbitFile> {
    let bad = |msg: String| Error::Config(format!("pseudo-orbit file: {msg}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty".into()))?.split(',').map(str::trim).collect();
    let discrete = match header.first() {
        Some(&"n") => true,
        Some(&"t") => false,
        _ => return Err(bad("first column must be `n` or `t`".into())),
    };
    let dim = header.iter().filter(|h| h.starts_with('y') && !h.starts_with("yp")).count();
    let n_prime = header.iter().filter(|h| h.starts_with("yp")).count();
    if dim == 0 || (n_prime != 0 && n_prime != dim) || header.len() != 1 + dim + n_prime {
        return Err(bad(format!("unexpected columns {header:?}")));
    }
    let (mut times, mut y, mut yp) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let vals = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| bad(format!("row {i}: {e}")))?;
        if vals.len() != header.len() {
            return Err(bad(format!("row {i} has {} fields, expected {}", vals.len(), header.len())));
        }
        if discrete && vals[0] != i as f64 {
            return Err(bad(format!("row {i} has index {}", vals[0])));
        }
        times.push(vals[0]);
        y.push(DVector::from_column_slice(&vals[1..1 + dim]));
        if n_prime > 0 {
            yp.push(DVector::from_column_slice(&vals[1 + dim..]));
        }
    }
    if times.len() < 2 {
        return Err(bad("needs at least two rows".into()));
    }
    Ok(OrbitFile { discrete, times, y, y_prime: (n_prime > 0).then_some(yp) })
}
