//! Per-observation drift table carried from one run to the next.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::laplace::PosteriorParams;
use crate::loss::ObservationTargets;
use crate::model::{Level, LATENT_DIM};

pub const REGISTRY_HEADER: &str = "index,level,dim,mu,sigma";

/// `(μ, σ)` of every training observation, per level and latent dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftRegistry {
    rows: Vec<ObservationTargets>,
}

impl DriftRegistry {
    pub fn new(rows: Vec<ObservationTargets>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            for p in r.iter().flatten() {
                if !(p.sigma > 0.0 && p.sigma.is_finite() && p.mu.is_finite()) {
                    return Err(Error::invalid(format!(
                        "registry entry of observation {i} is not a valid (mu, sigma): ({}, {})",
                        p.mu, p.sigma
                    )));
                }
            }
        }
        Ok(DriftRegistry { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ObservationTargets> {
        self.rows.get(index)
    }

    pub fn drift(&self, index: usize, level: Level) -> Option<[f64; LATENT_DIM]> {
        self.rows.get(index).map(|r| {
            let l = &r[level.index()];
            [l[0].mu, l[1].mu]
        })
    }

    pub fn rows(&self) -> &[ObservationTargets] {
        &self.rows
    }

    /// CSV text; 17 significant digits round-trip every `f64`.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * 4 * 56);
        s.push_str(REGISTRY_HEADER);
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            for level in Level::ALL {
                for (d, p) in r[level.index()].iter().enumerate() {
                    writeln!(
                        s,
                        "{i},{},{d},{:.16e},{:.16e}",
                        level.number(),
                        p.mu,
                        p.sigma
                    )
                    .expect("writing to a String");
                }
            }
        }
        s
    }

    /// Parses CSV text, requiring every `(index, level, dim)` exactly once
    /// for a contiguous index range starting at 0.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, detail: String| {
            Error::format("drift registry", format!("line {line}: {detail}"))
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == REGISTRY_HEADER => {}
            _ => return Err(bad(1, format!("expected header {REGISTRY_HEADER:?}"))),
        }
        let mut cells: Vec<[[Option<PosteriorParams>; LATENT_DIM]; 2]> = Vec::new();
        for (n, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(n + 1, format!("expected 5 fields, got {}", f.len())));
            }
            let int = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| bad(n + 1, format!("{s:?}: {e}")))
            };
            let real = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(n + 1, format!("{s:?}: {e}")))
            };
            let index = int(f[0])?;
            let level = Level::from_number(int(f[1])?).map_err(|e| bad(n + 1, e.to_string()))?;
            let dim = int(f[2])?;
            if dim >= LATENT_DIM {
                return Err(bad(n + 1, format!("latent dimension {dim} out of range")));
            }
            let p = PosteriorParams::new(real(f[3])?, real(f[4])?)
                .map_err(|e| bad(n + 1, e.to_string()))?;
            if index >= cells.len() {
                cells.resize(index + 1, [[None; LATENT_DIM]; 2]);
            }
            let slot = &mut cells[index][level.index()][dim];
            if slot.is_some() {
                return Err(bad(
                    n + 1,
                    format!("duplicate entry ({index}, {}, {dim})", level.number()),
                ));
            }
            *slot = Some(p);
        }
        let mut rows = Vec::with_capacity(cells.len());
        for (i, c) in cells.into_iter().enumerate() {
            let mut r = [[PosteriorParams {
                mu: 0.0,
                sigma: 1.0,
            }; LATENT_DIM]; 2];
            for l in 0..2 {
                for d in 0..LATENT_DIM {
                    r[l][d] = c[l][d].ok_or_else(|| {
                        Error::format(
                            "drift registry",
                            format!("missing entry ({i}, {}, {d})", l + 1),
                        )
                    })?;
                }
            }
            rows.push(r);
        }
        DriftRegistry::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
