//! Static operation counting and energy estimation.
//!
//! Counting law per layer, with `p = kh·kw·c_in·c_out·h_out·w_out`:
//! conv layers cost `p` multiplications and `p` additions, adder layers
//! cost no multiplications and `2p` additions. Batch norm, activations,
//! bias and resizing are not counted.
//!
//! Energy is accumulated in whole femtojoules so that it is exactly linear
//! in the counts.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::iter::Sum;
use std::ops::Add;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::FilterKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: FilterKind,
    pub kh: u64,
    pub kw: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub h_out: u64,
    pub w_out: u64,
}

impl LayerSpec {
    /// Text before the first `.` of the name.
    pub fn component(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }

    /// `kh·kw·c_in·c_out·h_out·w_out`, exact.
    pub fn taps(&self) -> u128 {
        [self.kh, self.kw, self.c_in, self.c_out, self.h_out, self.w_out]
            .iter()
            .map(|&v| u128::from(v))
            .product()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub name: String,
    pub input: Option<String>,
    /// Published FP32 energy in mJ, when the spec transcribes a table row.
    pub published_energy_mj: Option<f64>,
    pub published_int8_mj: Option<f64>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct OpCount {
    pub muls: u128,
    pub adds: u128,
}

impl OpCount {
    pub const ZERO: OpCount = OpCount { muls: 0, adds: 0 };

    pub fn total(&self) -> u128 {
        self.muls + self.adds
    }
}

impl Add for OpCount {
    type Output = OpCount;

    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            muls: self.muls + o.muls,
            adds: self.adds + o.adds,
        }
    }
}

impl Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::ZERO, Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Fp32,
    Int8,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Int8 => "int8",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(Precision::Fp32),
            "int8" => Ok(Precision::Int8),
            other => Err(Error::Config(format!(
                "unsupported precision `{other}` (expected fp32 or int8)"
            ))),
        }
    }
}

/// Per-operation energy, stored in femtojoules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnergyModel {
    pub e_mul_fj: u64,
    pub e_add_fj: u64,
    pub precision: Precision,
}

impl EnergyModel {
    pub const FP32: EnergyModel = EnergyModel {
        e_mul_fj: 3700,
        e_add_fj: 900,
        precision: Precision::Fp32,
    };
    pub const INT8: EnergyModel = EnergyModel {
        e_mul_fj: 200,
        e_add_fj: 30,
        precision: Precision::Int8,
    };

    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::Fp32 => Self::FP32,
            Precision::Int8 => Self::INT8,
        }
    }

    pub fn e_mul_pj(&self) -> f64 {
        self.e_mul_fj as f64 / 1e3
    }

    pub fn e_add_pj(&self) -> f64 {
        self.e_add_fj as f64 / 1e3
    }
}

pub fn count_layer(layer: &LayerSpec) -> OpCount {
    let p = layer.taps();
    match layer.kind {
        FilterKind::Conv => OpCount { muls: p, adds: p },
        FilterKind::Adder => OpCount { muls: 0, adds: 2 * p },
    }
}

pub fn count_model(spec: &ModelSpec) -> Result<OpCount> {
    if spec.layers.is_empty() {
        return Err(Error::Empty);
    }
    Ok(spec.layers.iter().map(count_layer).sum())
}

/// Energy in femtojoules, exact.
pub fn energy_fj(counts: OpCount, model: &EnergyModel) -> u128 {
    counts.muls * u128::from(model.e_mul_fj) + counts.adds * u128::from(model.e_add_fj)
}

pub fn energy_mj(counts: OpCount, model: &EnergyModel) -> f64 {
    fj_to_mj(energy_fj(counts, model))
}

pub fn fj_to_mj(fj: u128) -> f64 {
    // Split to keep full precision for counts beyond 2^53.
    let whole = fj / 1_000_000_000_000;
    let frac = fj % 1_000_000_000_000;
    whole as f64 + frac as f64 / 1e12
}

/// Formats a count in units of 10^9 with one decimal.
pub fn format_giga(v: u128) -> String {
    let tenths = (v + 50_000_000) / 100_000_000;
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Set of component names selected for conversion.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ComponentMask {
    components: Vec<String>,
}

impl ComponentMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, component: &str) -> bool {
        self.components.iter().any(|c| c == component)
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }
}

impl FromStr for ComponentMask {
    type Err = Error;

    /// Accepts `backbone,neck`, `B+N`, `none` or an empty string. The
    /// letters `B`, `N`, `H` stand for backbone, neck and head.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::empty());
        }
        let mut components = Vec::new();
        for part in s.split([',', '+']).map(str::trim) {
            let name = match part {
                "B" | "b" => "backbone",
                "N" | "n" => "neck",
                "H" | "h" => "head",
                p if !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') => p,
                p => return Err(Error::Config(format!("bad mask component `{p}`"))),
            };
            if !components.iter().any(|c| c == name) {
                components.push(name.to_string());
            }
        }
        Ok(Self { components })
    }
}

/// Flips masked layers to adder. The first layer stays conv unless
/// `force_first` is set.
pub fn convert_to_adder(spec: &ModelSpec, mask: &ComponentMask, force_first: bool) -> Result<ModelSpec> {
    if spec.layers.is_empty() {
        return Err(Error::Empty);
    }
    let mut out = spec.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        if (i > 0 || force_first) && mask.contains(layer.component()) {
            layer.kind = FilterKind::Adder;
        }
    }
    Ok(out)
}

fn spec_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "model spec",
        reason: format!("line {line}: {}", reason.into()),
    }
}

impl ModelSpec {
    /// Parses the line format `name kind kh kw c_in c_out h_out w_out`.
    /// `#` starts a comment; `# @key value` lines set metadata.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = ModelSpec::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(directive) = rest.trim().strip_prefix('@') {
                    let (key, value) = directive
                        .split_once(char::is_whitespace)
                        .map(|(k, v)| (k, v.trim()))
                        .unwrap_or((directive, ""));
                    let num = || -> Result<f64> {
                        value
                            .parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite() && *v >= 0.0)
                            .ok_or_else(|| spec_err(lineno, format!("bad value for @{key}")))
                    };
                    match key {
                        "name" => spec.name = value.to_string(),
                        "input" => spec.input = Some(value.to_string()),
                        "published_energy_mj" => spec.published_energy_mj = Some(num()?),
                        "published_int8_mj" => spec.published_int8_mj = Some(num()?),
                        other => return Err(spec_err(lineno, format!("unknown directive @{other}"))),
                    }
                }
                continue;
            }
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 8 {
                return Err(spec_err(lineno, format!("expected 8 fields, found {}", f.len())));
            }
            let kind: FilterKind = f[1]
                .parse()
                .map_err(|_| spec_err(lineno, format!("unknown kind `{}`", f[1])))?;
            let mut dims = [0u64; 6];
            for (d, s) in dims.iter_mut().zip(&f[2..]) {
                *d = s
                    .parse()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| spec_err(lineno, format!("dimension `{s}` is not a positive integer")))?;
            }
            if !seen.insert(f[0].to_string()) {
                return Err(spec_err(lineno, format!("duplicate layer name `{}`", f[0])));
            }
            spec.layers.push(LayerSpec {
                name: f[0].to_string(),
                kind,
                kh: dims[0],
                kw: dims[1],
                c_in: dims[2],
                c_out: dims[3],
                h_out: dims[4],
                w_out: dims[5],
            });
        }
        if spec.layers.is_empty() {
            return Err(Error::Empty);
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec = Self::parse(&std::fs::read_to_string(path)?)?;
        if spec.name.is_empty() {
            spec.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if !self.name.is_empty() {
            let _ = writeln!(s, "# @name {}", self.name);
        }
        if let Some(i) = &self.input {
            let _ = writeln!(s, "# @input {i}");
        }
        if let Some(e) = self.published_energy_mj {
            let _ = writeln!(s, "# @published_energy_mj {e}");
        }
        if let Some(e) = self.published_int8_mj {
            let _ = writeln!(s, "# @published_int8_mj {e}");
        }
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {}",
                l.name, l.kind, l.kh, l.kw, l.c_in, l.c_out, l.h_out, l.w_out
            );
        }
        s
    }
}

/// One row of an energy report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub kind: FilterKind,
    pub counts: OpCount,
    pub energy_fj: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub model: String,
    pub precision: Precision,
    pub rows: Vec<ReportRow>,
    pub total: OpCount,
    pub total_fj: u128,
}

impl EnergyReport {
    pub fn new(spec: &ModelSpec, model: &EnergyModel) -> Result<Self> {
        let rows: Vec<ReportRow> = spec
            .layers
            .iter()
            .map(|l| {
                let counts = count_layer(l);
                ReportRow {
                    name: l.name.clone(),
                    kind: l.kind,
                    counts,
                    energy_fj: energy_fj(counts, model),
                }
            })
            .collect();
        let total = count_model(spec)?;
        Ok(Self {
            model: spec.name.clone(),
            precision: model.precision,
            total_fj: energy_fj(total, model),
            total,
            rows,
        })
    }

    pub fn total_mj(&self) -> f64 {
        fj_to_mj(self.total_fj)
    }

    /// Fixed-width table: name, kind, muls (G), adds (G), energy (mJ).
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "model: {}  precision: {}", self.model, self.precision);
        let _ = writeln!(
            s,
            "{:<width$}  {:<5}  {:>10}  {:>10}  {:>12}",
            "layer", "kind", "muls(G)", "adds(G)", "energy(mJ)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:<5}  {:>10}  {:>10}  {:>12.2}",
                r.name,
                r.kind.name(),
                format_giga(r.counts.muls),
                format_giga(r.counts.adds),
                fj_to_mj(r.energy_fj)
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:<5}  {:>10}  {:>10}  {:>12.2}",
            "total",
            "",
            format_giga(self.total.muls),
            format_giga(self.total.adds),
            self.total_mj()
        );
        s
    }

    /// CSV with header `name,kind,muls,adds,energy_mj`; counts are exact.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,muls,adds,energy_mj\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6}",
                r.name,
                r.kind.name(),
                r.counts.muls,
                r.counts.adds,
                fj_to_mj(r.energy_fj)
            );
        }
        let _ = writeln!(
            s,
            "total,,{},{},{:.6}",
            self.total.muls,
            self.total.adds,
            self.total_mj()
        );
        s
    }
}
