//! Training losses over per-pixel class distributions: pixel-wise
//! cross-entropy and a one-hot Wasserstein (transport-cost) dice-style loss
//! driven by a class-transition cost matrix.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::PixelTargets;
use crate::tape::{Tape, VarId};
use crate::tensor::Real;

/// Non-negative class-to-class transition costs with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    num_classes: usize,
    costs: Vec<Real>,
}

impl CostMatrix {
    pub fn new(num_classes: usize, costs: Vec<Real>) -> Result<Self> {
        if costs.len() != num_classes * num_classes {
            return Err(Error::Config(format!(
                "cost matrix needs {0}x{0} entries, got {1}",
                num_classes,
                costs.len()
            )));
        }
        for (i, &v) in costs.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "cost matrix entry {i} is {v}; costs must be finite and non-negative"
                )));
            }
        }
        for c in 0..num_classes {
            if costs[c * num_classes + c] != 0.0 {
                return Err(Error::Config(format!(
                    "cost matrix diagonal entry [{c}][{c}] must be zero"
                )));
            }
        }
        Ok(CostMatrix {
            num_classes,
            costs,
        })
    }

    /// All-zero costs (a valid, if vacuous, matrix).
    pub fn zero(num_classes: usize) -> Self {
        CostMatrix {
            num_classes,
            costs: vec![0.0; num_classes * num_classes],
        }
    }

    /// Uniform unit cost off the diagonal.
    pub fn uniform(num_classes: usize) -> Self {
        let mut costs = vec![1.0; num_classes * num_classes];
        for c in 0..num_classes {
            costs[c * num_classes + c] = 0.0;
        }
        CostMatrix {
            num_classes,
            costs,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn costs(&self) -> &[Real] {
        &self.costs
    }

    pub fn get(&self, truth: usize, pred: usize) -> Real {
        self.costs[truth * self.num_classes + pred]
    }

    /// Parses the plain-text format: first line the class count, then that
    /// many rows of space-separated floats.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty cost-matrix file".to_string()))?;
        let c: usize = first
            .trim()
            .parse()
            .map_err(|_| parse_err(1, format!("expected class count, got {first:?}")))?;
        let mut costs = Vec::with_capacity(c * c);
        let mut rows = 0;
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<Real> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<Real>()
                        .map_err(|_| parse_err(idx + 1, format!("bad float {tok:?}")))
                })
                .collect::<Result<_>>()?;
            if row.len() != c {
                return Err(parse_err(
                    idx + 1,
                    format!("row has {} entries, expected {c}", row.len()),
                ));
            }
            costs.extend(row);
            rows += 1;
        }
        if rows != c {
            return Err(parse_err(
                rows + 1,
                format!("found {rows} rows, expected {c}"),
            ));
        }
        CostMatrix::new(c, costs)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.num_classes);
        for r in 0..self.num_classes {
            let row: Vec<String> = (0..self.num_classes)
                .map(|p| format!("{}", self.get(r, p)))
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }
}

/// Mean over non-ignored pixels of -log(pred[target]), with the probability
/// floored at 1e-12 inside the log. `pred` must be a per-pixel distribution.
pub fn cross_entropy(tape: &mut Tape, pred: VarId, targets: &PixelTargets) -> Result<VarId> {
    let num_classes = expected_classes(tape, pred, targets)?;
    let t = targets.loss_targets(num_classes)?;
    tape.cross_entropy_mean(pred, t)
}

/// One-hot Wasserstein cost: mean over non-ignored pixels of
/// sum_c M[target][c] * pred[c]. Zero exactly when every scored pixel puts
/// all its mass on the target class.
pub fn gwd_loss(
    tape: &mut Tape,
    pred: VarId,
    targets: &PixelTargets,
    m: &CostMatrix,
) -> Result<VarId> {
    let num_classes = expected_classes(tape, pred, targets)?;
    if m.num_classes() != num_classes {
        return Err(Error::Config(format!(
            "cost matrix is {}x{0}, prediction has {1} classes",
            m.num_classes(),
            num_classes
        )));
    }
    let t = targets.loss_targets(num_classes)?;
    tape.cost_mean(pred, t, std::sync::Arc::new(m.costs().to_vec()))
}

fn expected_classes(tape: &Tape, pred: VarId, targets: &PixelTargets) -> Result<usize> {
    let shape = tape.shape(pred);
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "loss prediction must be [C,H,W], got {shape:?}"
        )));
    }
    let (h, w) = targets.size();
    if shape[1] != h || shape[2] != w {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, targets {}x{}",
            shape[1], shape[2], h, w
        )));
    }
    Ok(shape[0])
}
