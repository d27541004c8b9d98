//! Run configuration: a plain `key = value` file, overridden by flags.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use mfcg::dofs::{NumberingKind, Traversal};
use mfcg::mesh::{parse_triple, GeometryVariant};
use mfcg::{BpId, SolverVariant};

use crate::error::CliError;

/// Keys in the order [`RunConfig::emit`] writes them.
pub const KEYS: [&str; 15] = [
    "bp",
    "degree",
    "cells",
    "geometry",
    "deformation",
    "variant",
    "rhs",
    "iterations",
    "repeats",
    "numbering",
    "traversal",
    "simd_lanes",
    "cache_bytes",
    "seed",
    "out",
];

/// Right-hand side of benchmark solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhsKind {
    /// Load vector of the smooth manufactured solution.
    Manufactured,
    /// Uniform in `[-1, 1]` from `seed`, zero on constrained entries.
    Random,
}

impl RhsKind {
    pub fn name(self) -> &'static str {
        match self {
            RhsKind::Manufactured => "manufactured",
            RhsKind::Random => "random",
        }
    }
}

impl FromStr for RhsKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "manufactured" => Ok(RhsKind::Manufactured),
            "random" => Ok(RhsKind::Random),
            _ => Err("expected manufactured or random".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub bp: Vec<BpId>,
    pub degree: Vec<usize>,
    pub cells: Vec<[usize; 3]>,
    pub geometry: Vec<GeometryVariant>,
    pub deformation: f64,
    pub variant: Vec<SolverVariant>,
    pub rhs: RhsKind,
    pub iterations: usize,
    pub repeats: usize,
    pub numbering: NumberingKind,
    pub traversal: Traversal,
    pub simd_lanes: usize,
    pub cache_bytes: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bp: vec![BpId::Bp5],
            degree: vec![3],
            cells: vec![[4, 4, 4]],
            geometry: vec![GeometryVariant::Affine],
            deformation: 0.0,
            variant: SolverVariant::all(4).to_vec(),
            rhs: RhsKind::Manufactured,
            iterations: 100,
            repeats: 8,
            numbering: NumberingKind::Optimized,
            traversal: Traversal::Morton,
            simd_lanes: 8,
            cache_bytes: 1 << 20,
            seed: 1,
            out: None,
        }
    }
}

fn usage(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("bad value '{value}' for '{key}': {why}"))
}

fn list<T>(key: &str, value: &str, sep: char, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = value
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).map_err(|e| usage(key, value, e)))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(usage(key, value, "empty list"));
    }
    Ok(items)
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| usage(key, value, e))
}

fn positive(key: &str, value: &str) -> Result<usize, CliError> {
    match scalar::<usize>(key, value)? {
        0 => Err(usage(key, value, "must be at least 1")),
        n => Ok(n),
    }
}

fn via<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "bp" => self.bp = list(key, value, ',', via)?,
            "degree" => {
                self.degree = list(key, value, ',', |s| match via::<usize>(s)? {
                    0 => Err("degree must be at least 1".into()),
                    p => Ok(p),
                })?
            }
            "cells" => {
                self.cells = list(key, value, ';', |s| {
                    let c: [usize; 3] = parse_triple(s).map_err(|e| e.to_string())?;
                    if c.contains(&0) {
                        return Err("cell counts must be at least 1".into());
                    }
                    Ok(c)
                })?
            }
            "geometry" => self.geometry = list(key, value, ',', via)?,
            "deformation" => self.deformation = scalar(key, value)?,
            "variant" => self.variant = if value == "all" { SolverVariant::all(4).to_vec() } else { list(key, value, ',', via)? },
            "rhs" => self.rhs = scalar(key, value)?,
            "iterations" => self.iterations = positive(key, value)?,
            "repeats" => self.repeats = positive(key, value)?,
            "numbering" => self.numbering = scalar(key, value)?,
            "traversal" => self.traversal = scalar(key, value)?,
            "simd_lanes" => self.simd_lanes = positive(key, value)?,
            "cache_bytes" => self.cache_bytes = positive(key, value)?,
            "seed" => self.seed = scalar(key, value)?,
            "out" => self.out = if value.is_empty() || value == "-" { None } else { Some(PathBuf::from(value)) },
            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; later lines win.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| CliError::Usage(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        let join = |v: Vec<String>, sep: &str| v.join(sep);
        let mut s = String::new();
        for key in KEYS {
            let value = match key {
                "bp" => join(self.bp.iter().map(|b| b.to_string()).collect(), ","),
                "degree" => join(self.degree.iter().map(|d| d.to_string()).collect(), ","),
                "cells" => join(self.cells.iter().map(|[a, b, c]| format!("{a} {b} {c}")).collect(), "; "),
                "geometry" => join(self.geometry.iter().map(|g| g.to_string()).collect(), ","),
                "deformation" => format!("{:?}", self.deformation),
                "variant" => join(self.variant.iter().map(|v| v.to_string()).collect(), ","),
                "rhs" => self.rhs.name().to_string(),
                "iterations" => self.iterations.to_string(),
                "repeats" => self.repeats.to_string(),
                "numbering" => self.numbering.to_string(),
                "traversal" => self.traversal.to_string(),
                "simd_lanes" => self.simd_lanes.to_string(),
                "cache_bytes" => self.cache_bytes.to_string(),
                "seed" => self.seed.to_string(),
                "out" => self.out.as_ref().map_or("-".into(), |p| p.display().to_string()),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }
}

/// `4x4x4`, the form used in CSV output.
pub fn cells_label(c: [usize; 3]) -> String {
    format!("{}x{}x{}", c[0], c[1], c[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn parses_lists_and_comments() {
        let c = RunConfig::parse("bp = bp3, BP4 # two problems\ncells = 2; 3 4 5\nvariant = pcg,sstep:3\nout = results.csv\n").unwrap();
        assert_eq!(c.bp, vec![BpId::Bp3, BpId::Bp4]);
        assert_eq!(c.cells, vec![[2, 2, 2], [3, 4, 5]]);
        assert_eq!(c.variant, vec![SolverVariant::Pcg, SolverVariant::SStep { s: 3 }]);
        assert_eq!(c.out, Some(PathBuf::from("results.csv")));
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["colour = red", "degree = 0", "cells = 0 1 1", "iterations = -3", "bp = bp9", "variant = ", "just words"] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Usage(_))), "{text}");
        }
    }

    fn variant() -> impl Strategy<Value = SolverVariant> {
        prop_oneof![
            Just(SolverVariant::Cg),
            Just(SolverVariant::Pcg),
            Just(SolverVariant::Pipelined),
            (1..9usize).prop_map(|s| SolverVariant::SStep { s }),
            Just(SolverVariant::CombinedCg),
            Just(SolverVariant::CombinedPcg),
        ]
    }

    proptest! {
        #[test]
        fn emit_then_parse_is_identity(
            bp in prop::collection::vec(0..5usize, 1..4),
            degree in prop::collection::vec(1..12usize, 1..4),
            cells in prop::collection::vec(prop::array::uniform3(1..64usize), 1..4),
            geometry in prop::collection::vec(0..5usize, 1..3),
            deformation in 0.0..0.3f64,
            variant in prop::collection::vec(variant(), 1..7),
            iterations in 1..1000usize,
            repeats in 1..20usize,
            random_rhs in any::<bool>(),
            lex in any::<bool>(),
            default_numbering in any::<bool>(),
            simd_lanes in 1..17usize,
            cache_bytes in 1..(1usize << 30),
            seed in any::<u64>(),
            out in prop::option::of("[a-z]{1,8}\\.csv"),
        ) {
            let c = RunConfig {
                bp: bp.into_iter().map(|i| BpId::ALL[i]).collect(),
                degree,
                cells,
                geometry: geometry.into_iter().map(|i| GeometryVariant::ALL[i]).collect(),
                deformation,
                variant,
                rhs: if random_rhs { RhsKind::Random } else { RhsKind::Manufactured },
                iterations,
                repeats,
                numbering: if default_numbering { NumberingKind::Default } else { NumberingKind::Optimized },
                traversal: if lex { Traversal::Lexicographic } else { Traversal::Morton },
                simd_lanes,
                cache_bytes,
                seed,
                out: out.map(PathBuf::from),
            };
            prop_assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
        }
    }
}
