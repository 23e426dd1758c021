//! Small textual specs used on the command line and in run configs.

use std::fmt;
use std::str::FromStr;

use eaf_core::geometry::BevGrid;

use crate::{CliError, Result};

/// `WxH@CELL` for a grid centered on the ego, or `WxH@CELL:X,Y` with
/// `(X, Y)` the minimum corner of the grid in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cell_size: f64,
    pub corner: Option<[f64; 2]>,
}

impl GridSpec {
    pub fn grid(&self) -> Result<BevGrid> {
        let g = match self.corner {
            None => BevGrid::centered(self.cells_x, self.cells_y, self.cell_size)?,
            Some([x, y]) => {
                let h = 0.5 * self.cell_size;
                BevGrid::new(self.cells_x, self.cells_y, self.cell_size, [x + h, y + h])?
            }
        };
        Ok(g)
    }
}

fn bad(what: &str, s: &str, expect: &str) -> CliError {
    CliError::Usage(format!("invalid {what} '{s}': expected {expect}"))
}

fn num<T: FromStr>(what: &str, s: &str, part: &str, expect: &str) -> Result<T> {
    part.trim().parse().map_err(|_| bad(what, s, expect))
}

impl FromStr for GridSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        const EXPECT: &str = "WxH@CELL or WxH@CELL:X,Y";
        let (dims, rest) = s.split_once('@').ok_or_else(|| bad("grid", s, EXPECT))?;
        let (w, h) = dims.split_once(['x', 'X']).ok_or_else(|| bad("grid", s, EXPECT))?;
        let (cell, corner) = match rest.split_once(':') {
            Some((c, xy)) => {
                let (x, y) = xy.split_once(',').ok_or_else(|| bad("grid", s, EXPECT))?;
                (c, Some([num("grid", s, x, EXPECT)?, num("grid", s, y, EXPECT)?]))
            }
            None => (rest, None),
        };
        let spec = GridSpec {
            cells_x: num("grid", s, w, EXPECT)?,
            cells_y: num("grid", s, h, EXPECT)?,
            cell_size: num("grid", s, cell, EXPECT)?,
            corner,
        };
        if spec.cells_x == 0 || spec.cells_y == 0 || !(spec.cell_size > 0.0 && spec.cell_size.is_finite()) {
            return Err(bad("grid", s, "positive cell counts and cell size"));
        }
        Ok(spec)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{}", self.cells_x, self.cells_y, self.cell_size)?;
        if let Some([x, y]) = self.corner {
            write!(f, ":{x},{y}")?;
        }
        Ok(())
    }
}

/// Rig perturbation `yaw=DEG,shift=M,seed=N` (all keys optional). Camera `k`
/// in name order is yawed by `+DEG` when `k` is even and `-DEG` when odd, and
/// moved horizontally by a seeded random offset of length at most `M`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerturbSpec {
    pub yaw_deg: f64,
    pub shift: f64,
    pub seed: u64,
}

impl FromStr for PerturbSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        const EXPECT: &str = "comma-separated yaw=DEG, shift=M, seed=N";
        let mut spec = PerturbSpec::default();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("perturbation", s, EXPECT))?;
            match k.trim() {
                "yaw" => spec.yaw_deg = num("perturbation", s, v, EXPECT)?,
                "shift" => spec.shift = num("perturbation", s, v, EXPECT)?,
                "seed" => spec.seed = num("perturbation", s, v, EXPECT)?,
                _ => return Err(bad("perturbation", s, EXPECT)),
            }
        }
        if !spec.yaw_deg.is_finite() || !(spec.shift >= 0.0 && spec.shift.is_finite()) {
            return Err(bad("perturbation", s, "finite yaw and non-negative shift"));
        }
        Ok(spec)
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "yaw=\u{b1}{}deg shift<={}m seed={}", self.yaw_deg, self.shift, self.seed)
    }
}

/// Feature down-scale given as `1/4`, `0.25` or the patch size `4`.
pub fn parse_patch(s: &str) -> Result<usize> {
    const EXPECT: &str = "1/N, a fraction 1/N as a decimal, or the integer N";
    let patch = if let Some(d) = s.strip_prefix("1/") {
        num::<usize>("scale", s, d, EXPECT)?
    } else if let Ok(n) = s.parse::<usize>() {
        n
    } else {
        let f: f64 = num("scale", s, s, EXPECT)?;
        if !(f > 0.0 && f <= 1.0) {
            return Err(bad("scale", s, EXPECT));
        }
        let n = (1.0 / f).round();
        if (n * f - 1.0).abs() > 1e-9 {
            return Err(bad("scale", s, EXPECT));
        }
        n as usize
    };
    if patch == 0 {
        return Err(bad("scale", s, EXPECT));
    }
    Ok(patch)
}

/// `I,J` cell index.
pub fn parse_query(s: &str) -> Result<(usize, usize)> {
    const EXPECT: &str = "I,J";
    let (i, j) = s.split_once(',').ok_or_else(|| bad("query", s, EXPECT))?;
    Ok((num("query", s, i, EXPECT)?, num("query", s, j, EXPECT)?))
}
