//! Run configuration: flat dotted keys in a TOML file.
//!
//! Every key is optional; missing keys take the defaults of
//! [`RunConfig::default`]. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fibrekahler::adiabatic::ExpansionOptions;
use fibrekahler::fibration::{Mode, TestbedSpec};
use fibrekahler::ift::IftOptions;
use fibrekahler::krylov::GmresOptions;
use fibrekahler::C64;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Error, Serialize)]
#[error("{}{}: {message}", key.as_deref().map(|k| format!("key `{k}`")).unwrap_or_else(|| "config".into()), line.map(|l| format!(" (line {l})")).unwrap_or_default())]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TwistSpec {
    Zero,
    /// `scale · i dz_b ∧ dz̄_b` pulled back from the base.
    PullbackDegenerate { scale: f64 },
    /// The fibration twist `α`, pulled back to the total space.
    FromFibration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub name: String,
    pub base_dim: usize,
    pub fibre_dim: usize,
    pub base_tau: [f64; 2],
    pub fibre_tau: [f64; 2],
    pub base_grid: usize,
    pub fibre_grid: usize,
    pub epsilon: f64,
    pub modes: Vec<Mode>,
    pub twist: TwistSpec,
    pub gmres_tol: f64,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub newton_max_halvings: usize,
    pub ift_gmres_tol: f64,
    pub contour_radius: f64,
    pub contour_points: usize,
    pub r_list: Vec<f64>,
    pub p_max: usize,
    pub solve_r: f64,
    pub solve_p: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TestbedSpec::standard(16, 0.1);
        let e = ExpansionOptions::default();
        let i = IftOptions::default();
        Self {
            name: "default".into(),
            base_dim: 1,
            fibre_dim: 1,
            base_tau: [0.0, 1.0],
            fibre_tau: [0.0, 1.0],
            base_grid: 16,
            fibre_grid: 16,
            epsilon: t.epsilon,
            modes: t.modes,
            twist: TwistSpec::FromFibration,
            gmres_tol: e.gmres.tol,
            gmres_restart: e.gmres.restart,
            gmres_max_iter: e.gmres.max_iter,
            newton_tol: i.newton_tol,
            newton_max_iter: i.max_iterations,
            newton_max_halvings: i.max_halvings,
            ift_gmres_tol: i.gmres.tol,
            contour_radius: e.contour_r,
            contour_points: e.contour_points,
            r_list: vec![8.0, 16.0, 32.0, 64.0],
            p_max: 2,
            solve_r: 32.0,
            solve_p: 2,
            seed: 7,
            output_dir: None,
        }
    }
}

const KEYS: &[&str] = &[
    "name",
    "manifold.base.dim",
    "manifold.fibre.dim",
    "manifold.base.tau",
    "manifold.fibre.tau",
    "manifold.base.grid",
    "manifold.fibre.grid",
    "testbed.epsilon",
    "testbed.modes",
    "twist.kind",
    "twist.scale",
    "solver.gmres.tol",
    "solver.gmres.restart",
    "solver.gmres.max_iter",
    "solver.newton.tol",
    "solver.newton.max_iter",
    "solver.newton.max_halvings",
    "solver.ift.gmres_tol",
    "solver.contour.radius",
    "solver.contour.points",
    "adiabatic.r_list",
    "adiabatic.p_max",
    "solve.r",
    "solve.p",
    "seed",
    "output.dir",
];

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// 1-based line of the assignment to `key`, if written out in full.
fn line_of(src: &str, key: &str) -> Option<usize> {
    src.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

struct Reader<'a> {
    src: &'a str,
    values: BTreeMap<String, toml::Value>,
}

impl Reader<'_> {
    fn err(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            key: Some(key.into()),
            line: line_of(self.src, key),
            message: message.into(),
        }
    }

    fn float(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(toml::Value::Float(v)) => Ok(*v),
            Some(toml::Value::Integer(v)) => Ok(*v as f64),
            Some(v) => Err(self.err(key, format!("expected a number, found {}", v.type_str()))),
        }
    }

    fn uint(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(v) => Err(self.err(key, format!("expected a non-negative integer, found {v}"))),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(self.err(key, format!("expected a string, found {}", v.type_str()))),
        }
    }

    fn floats(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.values.get(key) else { return Ok(None) };
        let arr = v.as_array().ok_or_else(|| self.err(key, "expected an array of numbers"))?;
        arr.iter()
            .map(|x| match x {
                toml::Value::Float(f) => Ok(*f),
                toml::Value::Integer(i) => Ok(*i as f64),
                _ => Err(self.err(key, "expected an array of numbers")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn tau(&self, key: &str, default: [f64; 2]) -> Result<[f64; 2], ConfigError> {
        match self.floats(key)? {
            None => Ok(default),
            Some(v) if v.len() == 2 => Ok([v[0], v[1]]),
            Some(_) => Err(self.err(key, "expected [re, im]")),
        }
    }

    fn modes(&self, key: &str, default: Vec<Mode>) -> Result<Vec<Mode>, ConfigError> {
        let Some(v) = self.values.get(key) else { return Ok(default) };
        let shape = "expected an array of [k1, k2, k3, k4, amplitude, phase]";
        let arr = v.as_array().ok_or_else(|| self.err(key, shape))?;
        let mut modes = Vec::new();
        for m in arr {
            let row = m.as_array().filter(|r| r.len() == 6).ok_or_else(|| self.err(key, shape))?;
            let k = row[..4]
                .iter()
                .map(|x| x.as_integer().ok_or_else(|| self.err(key, "wavevector entries must be integers")))
                .collect::<Result<Vec<_>, _>>()?;
            let num = |x: &toml::Value| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)).ok_or_else(|| self.err(key, shape));
            modes.push(Mode {
                k,
                amplitude: num(&row[4])?,
                phase: num(&row[5])?,
            });
        }
        Ok(modes)
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            key: None,
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut cfg = Self::parse(&src)?;
        if !src.lines().any(|l| line_of(l, "name").is_some()) {
            if let Some(stem) = path.file_stem() {
                cfg.name = stem.to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = src.parse().map_err(|e: toml::de::Error| ConfigError {
            key: None,
            line: e.span().map(|s| line_of_offset(src, s.start)),
            message: e.message().to_string(),
        })?;
        let mut values = BTreeMap::new();
        flatten("", &table, &mut values);
        let rd = Reader { src, values };
        if let Some(k) = rd.values.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(rd.err(k, "unknown key"));
        }
        let d = Self::default();
        let twist = match rd.string("twist.kind")?.as_deref() {
            None | Some("from-fibration") => TwistSpec::FromFibration,
            Some("zero") => TwistSpec::Zero,
            Some("pullback-degenerate") => TwistSpec::PullbackDegenerate {
                scale: rd.float("twist.scale", 1.0)?,
            },
            Some(other) => {
                return Err(rd.err(
                    "twist.kind",
                    format!("unknown twist `{other}` (expected zero, pullback-degenerate or from-fibration)"),
                ))
            }
        };
        let cfg = Self {
            name: rd.string("name")?.unwrap_or(d.name),
            base_dim: rd.uint("manifold.base.dim", d.base_dim)?,
            fibre_dim: rd.uint("manifold.fibre.dim", d.fibre_dim)?,
            base_tau: rd.tau("manifold.base.tau", d.base_tau)?,
            fibre_tau: rd.tau("manifold.fibre.tau", d.fibre_tau)?,
            base_grid: rd.uint("manifold.base.grid", d.base_grid)?,
            fibre_grid: rd.uint("manifold.fibre.grid", d.fibre_grid)?,
            epsilon: rd.float("testbed.epsilon", d.epsilon)?,
            modes: rd.modes("testbed.modes", d.modes)?,
            twist,
            gmres_tol: rd.float("solver.gmres.tol", d.gmres_tol)?,
            gmres_restart: rd.uint("solver.gmres.restart", d.gmres_restart)?,
            gmres_max_iter: rd.uint("solver.gmres.max_iter", d.gmres_max_iter)?,
            newton_tol: rd.float("solver.newton.tol", d.newton_tol)?,
            newton_max_iter: rd.uint("solver.newton.max_iter", d.newton_max_iter)?,
            newton_max_halvings: rd.uint("solver.newton.max_halvings", d.newton_max_halvings)?,
            ift_gmres_tol: rd.float("solver.ift.gmres_tol", d.ift_gmres_tol)?,
            contour_radius: rd.float("solver.contour.radius", d.contour_radius)?,
            contour_points: rd.uint("solver.contour.points", d.contour_points)?,
            r_list: rd.floats("adiabatic.r_list")?.unwrap_or(d.r_list),
            p_max: rd.uint("adiabatic.p_max", d.p_max)?,
            solve_r: rd.float("solve.r", d.solve_r)?,
            solve_p: rd.uint("solve.p", d.solve_p)?,
            seed: rd.uint("seed", d.seed as usize)? as u64,
            output_dir: rd.string("output.dir")?.map(PathBuf::from),
        };
        cfg.validate(&rd)?;
        Ok(cfg)
    }

    fn validate(&self, rd: &Reader) -> Result<(), ConfigError> {
        for (key, dim) in [("manifold.base.dim", self.base_dim), ("manifold.fibre.dim", self.fibre_dim)] {
            if dim != 1 {
                return Err(rd.err(key, format!("only complex dimension 1 is supported, got {dim}")));
            }
        }
        for (key, g) in [("manifold.base.grid", self.base_grid), ("manifold.fibre.grid", self.fibre_grid)] {
            if g < 8 || g % 2 != 0 {
                return Err(rd.err(key, format!("grid size must be even and at least 8, got {g}")));
            }
        }
        for (key, t) in [("manifold.base.tau", self.base_tau), ("manifold.fibre.tau", self.fibre_tau)] {
            if !(t[1] > 0.0) {
                return Err(rd.err(key, "period must have positive imaginary part"));
            }
        }
        for (key, v) in [
            ("solver.gmres.tol", self.gmres_tol),
            ("solver.newton.tol", self.newton_tol),
            ("solver.ift.gmres_tol", self.ift_gmres_tol),
            ("solver.contour.radius", self.contour_radius),
            ("solve.r", self.solve_r),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(rd.err(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [
            ("solver.gmres.restart", self.gmres_restart),
            ("solver.gmres.max_iter", self.gmres_max_iter),
            ("solver.newton.max_iter", self.newton_max_iter),
            ("solver.contour.points", self.contour_points),
        ] {
            if v == 0 {
                return Err(rd.err(key, "must be positive"));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(rd.err("testbed.epsilon", format!("must be non-negative, got {}", self.epsilon)));
        }
        if self.r_list.len() < 2 {
            return Err(rd.err("adiabatic.r_list", "needs at least two values"));
        }
        if self.r_list.iter().any(|&r| !(r > 0.0)) || self.r_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(rd.err("adiabatic.r_list", "must be positive and strictly increasing"));
        }
        if self.modes.iter().any(|m| m.k.len() != 4) {
            return Err(rd.err("testbed.modes", "wavevectors need four entries"));
        }
        Ok(())
    }

    pub fn testbed(&self) -> TestbedSpec {
        TestbedSpec {
            base_periods: vec![C64::new(self.base_tau[0], self.base_tau[1])],
            fibre_periods: vec![C64::new(self.fibre_tau[0], self.fibre_tau[1])],
            base_grid: vec![self.base_grid; 2],
            fibre_grid: vec![self.fibre_grid; 2],
            epsilon: self.epsilon,
            modes: self.modes.clone(),
        }
    }

    pub fn gmres(&self) -> GmresOptions {
        GmresOptions {
            tol: self.gmres_tol,
            restart: self.gmres_restart,
            max_iter: self.gmres_max_iter,
        }
    }

    pub fn expansion(&self) -> ExpansionOptions {
        ExpansionOptions {
            contour_r: self.contour_radius,
            contour_points: self.contour_points,
            gmres: self.gmres(),
            ..Default::default()
        }
    }

    pub fn ift(&self) -> IftOptions {
        IftOptions {
            gmres: GmresOptions {
                tol: self.ift_gmres_tol,
                ..self.gmres()
            },
            newton_tol: self.newton_tol,
            max_iterations: self.newton_max_iter,
            max_halvings: self.newton_max_halvings,
            seed: self.seed,
            ..Default::default()
        }
    }
}
