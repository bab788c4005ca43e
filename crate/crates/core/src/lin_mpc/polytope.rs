use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A single halfspace `normal · x + offset <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: DVector<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) + self.offset
    }
}

/// Intersection of halfspaces in a fixed ambient dimension.
///
/// A polytope with no rows is the whole space.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    dim: usize,
    rows: Vec<Halfspace>,
}

impl Polytope {
    pub fn new(dim: usize, rows: Vec<Halfspace>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.normal.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "halfspace {i} has normal of length {} in dimension {dim}",
                    row.normal.len()
                )));
            }
            if !row.normal.iter().all(|v| v.is_finite()) || !row.offset.is_finite() {
                return Err(Error::InvalidParameter(format!("halfspace {i} is not finite")));
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn unconstrained(dim: usize) -> Self {
        Self { dim, rows: Vec::new() }
    }

    /// Axis-aligned box. Rows are emitted per axis as upper bound then lower bound.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch("box bounds differ in length".into()));
        }
        let dim = lo.len();
        let mut rows = Vec::with_capacity(2 * dim);
        for j in 0..dim {
            if lo[j] > hi[j] {
                return Err(Error::InvalidParameter(format!("box axis {j} has lo > hi")));
            }
            let mut up = DVector::zeros(dim);
            up[j] = 1.0;
            rows.push(Halfspace::new(up, -hi[j]));
            let mut down = DVector::zeros(dim);
            down[j] = -1.0;
            rows.push(Halfspace::new(down, lo[j]));
        }
        Self::new(dim, rows)
    }

    pub fn symmetric_box(dim: usize, bound: f64) -> Result<Self> {
        Self::from_box(&vec![-bound; dim], &vec![bound; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Halfspace] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Halfspace) -> Result<()> {
        if row.normal.len() != self.dim {
            return Err(Error::DimensionMismatch("halfspace dimension".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch("intersecting polytopes of different dimension".into()));
        }
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        Ok(Polytope { dim: self.dim, rows })
    }

    pub fn values(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.value(x)))
    }

    /// Largest row value; negative infinity when there are no rows.
    pub fn max_value(&self, x: &DVector<f64>) -> f64 {
        self.rows.iter().map(|r| r.value(x)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.max_value(x) <= tol
    }

    pub fn contains_strictly(&self, x: &DVector<f64>) -> bool {
        self.max_value(x) < 0.0
    }

    /// Rows stacked as a matrix `E` and offset vector `g`, so the set is `E x + g <= 0`.
    pub fn as_matrix(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut e = DMatrix::zeros(self.rows.len(), self.dim);
        let mut g = DVector::zeros(self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            e.row_mut(i).copy_from(&r.normal.transpose());
            g[i] = r.offset;
        }
        (e, g)
    }

    /// Certifies a nonempty interior by finding a point with every row strictly negative.
    pub fn strict_interior_point(&self, start: &DVector<f64>) -> Result<DVector<f64>> {
        let (e, g) = self.as_matrix();
        interior_point(&e, &g, start.clone(), 1e-6)
    }
}

/// Phase-I search for a point with `E x + g <= -required` on every row with a nonzero normal.
///
/// Minimizes the max row violation by Polyak subgradient steps (the subgradient of the max is
/// the normal of the most violated row), aiming at a shrinking sequence of interior margins.
/// Rows with zero normal cannot be moved and must already satisfy the requirement.
pub fn interior_point(
    e: &DMatrix<f64>,
    g: &DVector<f64>,
    start: DVector<f64>,
    required: f64,
) -> Result<DVector<f64>> {
    const ITERS_PER_MARGIN: usize = 4000;
    let n_rows = e.nrows();
    let norms: Vec<f64> = (0..n_rows).map(|i| e.row(i).norm()).collect();
    for i in 0..n_rows {
        if norms[i] <= 1e-14 && g[i] > -required {
            return Err(Error::InfeasibleProblem(format!(
                "constant row {i} has value {:e}",
                g[i]
            )));
        }
    }
    let mut x = start;
    let scale = 1.0 + x.amax();
    let mut margin = (1e-2 * scale).max(required);
    loop {
        let target = margin;
        let mut ok = false;
        for _ in 0..ITERS_PER_MARGIN {
            let s = e * &x + g;
            let mut worst = None;
            let mut worst_val = 0.0;
            for i in 0..n_rows {
                if norms[i] <= 1e-14 {
                    continue;
                }
                let v = (s[i] + target) / norms[i];
                if v > worst_val {
                    worst_val = v;
                    worst = Some(i);
                }
            }
            match worst {
                None => {
                    ok = true;
                    break;
                }
                Some(i) => {
                    // Over-relaxed projection onto the shifted halfspace.
                    let step = 1.5 * (s[i] + target) / (norms[i] * norms[i]);
                    x -= e.row(i).transpose() * step;
                }
            }
        }
        if ok {
            let s = e * &x + g;
            if (0..n_rows).all(|i| s[i] <= -required) {
                return Ok(x);
            }
        }
        if margin <= required {
            break;
        }
        margin = (margin * 0.1).max(required);
    }
    Err(Error::InfeasibleProblem(
        "phase-I could not reach the strict interior".into(),
    ))
}
