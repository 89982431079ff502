//! Small analytic bilevel problems and an exact implicit-gradient oracle
//! for checking the zeroth-order hypergradient.

use crate::error::{Error, Result};
use crate::search::zo_hypergradient;

/// Upper level `F(α) = L_val(w*(α), α)` with `w*(α) = argmin_w L_train(w, α)`.
pub trait BilevelProblem {
    fn dim_w(&self) -> usize;
    fn dim_alpha(&self) -> usize;
    fn train_grad_w(&self, w: &[f64], alpha: &[f64]) -> Vec<f64>;
    fn val_loss(&self, w: &[f64], alpha: &[f64]) -> f64;
    fn val_grad_w(&self, w: &[f64], alpha: &[f64]) -> Vec<f64>;
    fn val_grad_alpha(&self, w: &[f64], alpha: &[f64]) -> Vec<f64>;

    /// Closed-form structure when the lower level is a strictly convex quadratic.
    fn as_quadratic(&self) -> Option<&QuadraticBilevel> {
        None
    }
}

/// `L_train = ½wᵀAw − wᵀ(B·s(α) + c)` with `s(α) = α + ½κ·α∘α`, and
/// `L_val = ½(w − t)ᵀP(w − t) + qᵀα + ½ρ‖α‖²`.
///
/// `A` must be symmetric positive definite; `κ ≠ 0` makes `w*(α)` nonlinear.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBilevel {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub kappa: f64,
    pub p: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub q: Vec<f64>,
    pub rho: f64,
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn matvec_t(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.iter().zip(v).map(|(row, x)| row[j] * x).sum()).collect()
}

/// Solves `M x = y` by Gaussian elimination with partial pivoting.
fn solve(m: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    let mut a: Vec<Vec<f64>> = m.iter().zip(y).map(|(r, v)| r.iter().copied().chain([*v]).collect()).collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::InvalidArgument("singular lower-level Hessian".into()));
        }
        a.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..=n {
                a[r][k] -= f * a[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (a[r][n] - s) / a[r][r];
    }
    Ok(x)
}

impl QuadraticBilevel {
    /// `L_train = ½(w − α)²`, `L_val = ½w²`: `w* = α`, `dF/dα = α`.
    pub fn scalar() -> Self {
        Self {
            a: vec![vec![1.0]],
            b: vec![vec![1.0]],
            c: vec![0.0],
            kappa: 0.0,
            p: vec![vec![1.0]],
            t: vec![0.0],
            q: vec![0.0],
            rho: 0.0,
        }
    }

    fn s(&self, alpha: &[f64]) -> Vec<f64> {
        alpha.iter().map(|a| a + 0.5 * self.kappa * a * a).collect()
    }

    fn rhs(&self, alpha: &[f64]) -> Vec<f64> {
        matvec(&self.b, &self.s(alpha)).iter().zip(&self.c).map(|(x, y)| x + y).collect()
    }

    /// `w*(α) = A⁻¹(B·s(α) + c)`.
    pub fn lower_solution(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        solve(&self.a, &self.rhs(alpha))
    }

    /// `F(α)` evaluated at the exact lower-level solution.
    pub fn upper_objective(&self, alpha: &[f64]) -> Result<f64> {
        Ok(self.val_loss(&self.lower_solution(alpha)?, alpha))
    }

    /// Largest absolute row sum of `A`, an upper bound on its spectrum.
    pub fn curvature_bound(&self) -> f64 {
        self.a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn dim_w(&self) -> usize {
        self.c.len()
    }

    fn dim_alpha(&self) -> usize {
        self.q.len()
    }

    fn train_grad_w(&self, w: &[f64], alpha: &[f64]) -> Vec<f64> {
        matvec(&self.a, w).iter().zip(self.rhs(alpha)).map(|(x, y)| x - y).collect()
    }

    fn val_loss(&self, w: &[f64], alpha: &[f64]) -> f64 {
        let d: Vec<f64> = w.iter().zip(&self.t).map(|(a, b)| a - b).collect();
        let pd = matvec(&self.p, &d);
        0.5 * d.iter().zip(&pd).map(|(a, b)| a * b).sum::<f64>()
            + self.q.iter().zip(alpha).map(|(a, b)| a * b).sum::<f64>()
            + 0.5 * self.rho * alpha.iter().map(|a| a * a).sum::<f64>()
    }

    fn val_grad_w(&self, w: &[f64], _alpha: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = w.iter().zip(&self.t).map(|(a, b)| a - b).collect();
        matvec(&self.p, &d)
    }

    fn val_grad_alpha(&self, _w: &[f64], alpha: &[f64]) -> Vec<f64> {
        self.q.iter().zip(alpha).map(|(q, a)| q + self.rho * a).collect()
    }

    fn as_quadratic(&self) -> Option<&QuadraticBilevel> {
        Some(self)
    }
}

/// Exact `∇F = ∇_α L_val − ∇²_{αw}L_train · (∇²_w L_train)⁻¹ · ∇_w L_val`
/// at `w*(α)`, with the Hessian solve done directly.
pub fn implicit_gradient_exact(problem: &dyn BilevelProblem, alpha: &[f64]) -> Result<Vec<f64>> {
    let q = problem
        .as_quadratic()
        .ok_or_else(|| Error::InvalidArgument("exact implicit gradient needs a quadratic lower level".into()))?;
    let w = q.lower_solution(alpha)?;
    let gw = q.val_grad_w(&w, alpha);
    let v = solve(&q.a, &gw)?;
    // ∇²_{αw}L_train = −diag(s′(α))·Bᵀ.
    let btv = matvec_t(&q.b, &v);
    Ok(q
        .val_grad_alpha(&w, alpha)
        .iter()
        .zip(&btv)
        .zip(alpha)
        .map(|((g, x), a)| g + (1.0 + q.kappa * a) * x)
        .collect())
}

/// Gradient descent on the lower level from `w0`.
pub fn inner_descent(problem: &dyn BilevelProblem, w0: &[f64], alpha: &[f64], steps: usize, lr: f64) -> Vec<f64> {
    let mut w = w0.to_vec();
    for _ in 0..steps {
        let g = problem.train_grad_w(&w, alpha);
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= lr * gi;
        }
    }
    w
}

/// One zeroth-order round: both copies descend from `w0` for `steps`
/// steps, one at `α`, one at `α + μu`, and the estimate is assembled from
/// the validation gradients at the primary copy.
pub fn zo_round(
    problem: &dyn BilevelProblem,
    alpha: &[f64],
    u: &[f64],
    mu: f64,
    w0: &[f64],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if u.len() != alpha.len() || w0.len() != problem.dim_w() {
        return Err(Error::shape("zo_round", "direction or start point has the wrong length"));
    }
    let shifted: Vec<f64> = alpha.iter().zip(u).map(|(a, d)| a + mu * d).collect();
    let w = inner_descent(problem, w0, alpha, steps, lr);
    let w_tilde = inner_descent(problem, w0, &shifted, steps, lr);
    zo_hypergradient(
        &problem.val_grad_alpha(&w, alpha),
        &problem.val_grad_w(&w, alpha),
        &w,
        &w_tilde,
        u,
        mu,
    )
}
