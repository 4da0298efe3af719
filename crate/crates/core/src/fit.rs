//! Levenberg–Marquardt fit of an axis-aligned 2D Gaussian
//! `A · exp(−((x − x_c)² / (2σ_X²) + (y − y_c)² / (2σ_Y²)))` to a grid.
//!
//! `x` runs along columns and `y` along rows, in cell units offset by the
//! problem's origin. All arithmetic is `f64`.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};

type Vec5 = SVector<f64, 5>;
type Mat5 = SMatrix<f64, 5, 5>;

pub const INITIAL_DAMPING: f64 = 1e-3;
pub const DAMPING_FACTOR: f64 = 10.0;
pub const COST_TOLERANCE: f64 = 1e-10;
pub const STEP_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_TOLERANCE: f64 = 1e-14;
pub const MAX_ITERATIONS: usize = 200;
const MAX_DAMPING: f64 = 1e16;

/// `[A, x_c, y_c, σ_X, σ_Y]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams {
    pub amplitude: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl GaussianParams {
    fn to_vec(self) -> Vec5 {
        Vec5::new(self.amplitude, self.center_x, self.center_y, self.sigma_x, self.sigma_y)
    }

    fn from_vec(v: &Vec5) -> Self {
        Self { amplitude: v[0], center_x: v[1], center_y: v[2], sigma_x: v[3], sigma_y: v[4] }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        self.amplitude
            * (-(dx * dx / (2.0 * self.sigma_x * self.sigma_x) + dy * dy / (2.0 * self.sigma_y * self.sigma_y))).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitProblem {
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width`.
    pub values: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    /// Coordinates of cell `(0, 0)` as `(x, y)`.
    pub origin: (f64, f64),
    pub initial: Option<GaussianParams>,
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_factor: f64,
}

impl FitProblem {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        Self {
            height,
            width,
            values,
            weights: None,
            origin: (0.0, 0.0),
            initial: None,
            max_iterations: MAX_ITERATIONS,
            initial_damping: INITIAL_DAMPING,
            damping_factor: DAMPING_FACTOR,
        }
    }

    pub fn from_f32(height: usize, width: usize, values: &[f32]) -> Self {
        Self::new(height, width, values.iter().map(|&v| v as f64).collect())
    }

    fn validate(&self) -> Result<()> {
        if self.height * self.width != self.values.len() {
            return Err(Error::Shape(format!(
                "{}x{} grid needs {} values, got {}",
                self.height,
                self.width,
                self.height * self.width,
                self.values.len()
            )));
        }
        if self.values.len() <= 5 {
            return Err(Error::Invalid(format!("{} cells cannot constrain 5 parameters", self.values.len())));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fit grid".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.values.len() || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Invalid("weights must be finite, non-negative and match the grid".into()));
            }
        }
        if total_sum_of_squares(&self.values) <= 0.0 {
            return Err(Error::Invalid("R² undefined for constant input".into()));
        }
        Ok(())
    }

    fn coords(&self, i: usize) -> (f64, f64) {
        ((i % self.width) as f64 + self.origin.0, (i / self.width) as f64 + self.origin.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Absolute values; the model depends only on `σ²`.
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub r_squared: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
    /// Cost after the initial guess and after every accepted step.
    pub cost_history: Vec<f64>,
}

impl GaussianFit {
    pub fn params(&self) -> GaussianParams {
        GaussianParams {
            amplitude: self.amplitude,
            center_x: self.center_x,
            center_y: self.center_y,
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
        }
    }

    /// `name=value` lines in a fixed key order.
    pub fn to_record(&self) -> String {
        format!(
            "r_squared={:.6}\nsigma_x={:.6}\nsigma_y={:.6}\namplitude={:.6}\ncenter_x={:.6}\ncenter_y={:.6}\nconverged={}\niterations={}\n",
            self.r_squared, self.sigma_x, self.sigma_y, self.amplitude, self.center_x, self.center_y, self.converged, self.iterations
        )
    }
}

fn total_sum_of_squares(values: &[f64]) -> f64 {
    if values.iter().all(|v| *v == values[0]) {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// `1 − SS_res / SS_tot`.
pub fn r_squared(values: &[f64], fitted: &[f64]) -> Result<f64> {
    if values.len() != fitted.len() || values.is_empty() {
        return Err(Error::Shape(format!("{} values vs {} fitted", values.len(), fitted.len())));
    }
    let ss_tot = total_sum_of_squares(values);
    if ss_tot <= 0.0 {
        return Err(Error::Invalid("R² undefined for constant input".into()));
    }
    let ss_res: f64 = values.iter().zip(fitted).map(|(v, f)| (v - f) * (v - f)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Moment-based starting point: amplitude `max − min`, center at the
/// argmax cell, widths from the second moments of `grid − min`.
pub fn initial_guess(height: usize, width: usize, values: &[f64]) -> Result<GaussianParams> {
    let problem = FitProblem::new(height, width, values.to_vec());
    problem.validate()?;
    Ok(guess(&problem))
}

fn guess(p: &FitProblem) -> GaussianParams {
    let (mut max_i, mut min) = (0, f64::INFINITY);
    for (i, &v) in p.values.iter().enumerate() {
        if v > p.values[max_i] {
            max_i = i;
        }
        min = min.min(v);
    }
    let max = p.values[max_i];
    let (cx, cy) = p.coords(max_i);
    let (mut mass, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (i, &v) in p.values.iter().enumerate() {
        let (x, y) = p.coords(i);
        let m = v - min;
        mass += m;
        mx += m * x;
        my += m * y;
    }
    let (mx, my) = (mx / mass, my / mass);
    let (mut vx, mut vy) = (0.0, 0.0);
    for (i, &v) in p.values.iter().enumerate() {
        let (x, y) = p.coords(i);
        let m = v - min;
        vx += m * (x - mx) * (x - mx);
        vy += m * (y - my) * (y - my);
    }
    let hi = 10.0 * p.height.max(p.width) as f64;
    let clamp = |v: f64| if v.is_finite() { v.sqrt().clamp(0.5, hi) } else { 0.5 };
    GaussianParams {
        amplitude: max - min,
        center_x: cx,
        center_y: cy,
        sigma_x: clamp(vx / mass),
        sigma_y: clamp(vy / mass),
    }
}

struct Evaluation {
    cost: f64,
    jtj: Mat5,
    jtr: Vec5,
}

fn evaluate(p: &FitProblem, params: &Vec5, with_jacobian: bool) -> Evaluation {
    let g = GaussianParams::from_vec(params);
    let (sx2, sy2) = (g.sigma_x * g.sigma_x, g.sigma_y * g.sigma_y);
    let mut cost = 0.0;
    let mut jtj = Mat5::zeros();
    let mut jtr = Vec5::zeros();
    for (i, &v) in p.values.iter().enumerate() {
        let w = p.weights.as_ref().map_or(1.0, |w| w[i]);
        let (x, y) = p.coords(i);
        let (dx, dy) = (x - g.center_x, y - g.center_y);
        let e = (-(dx * dx / (2.0 * sx2) + dy * dy / (2.0 * sy2))).exp();
        let model = g.amplitude * e;
        let r = model - v;
        cost += w * r * r;
        if with_jacobian {
            let ae = g.amplitude * e;
            let j = Vec5::new(
                e,
                ae * dx / sx2,
                ae * dy / sy2,
                ae * dx * dx / (sx2 * g.sigma_x),
                ae * dy * dy / (sy2 * g.sigma_y),
            );
            jtj += w * j * j.transpose();
            jtr += w * r * j;
        }
    }
    Evaluation { cost, jtj, jtr }
}

/// Fits the Gaussian model. Returns the best parameters found even when
/// the iteration budget runs out (`converged == false`).
pub fn fit(problem: &FitProblem) -> Result<GaussianFit> {
    problem.validate()?;
    let mut params = problem.initial.unwrap_or_else(|| guess(problem)).to_vec();
    let mut current = evaluate(problem, &params, true);
    let mut lambda = problem.initial_damping;
    let mut converged = current.cost == 0.0;
    let mut iterations = 0;
    let mut cost_history = vec![current.cost];
    while !converged && iterations < problem.max_iterations {
        iterations += 1;
        if current.jtr.amax() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda <= MAX_DAMPING {
            let mut a = current.jtj;
            for k in 0..5 {
                a[(k, k)] += lambda * current.jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-current.jtr)) else {
                lambda *= problem.damping_factor;
                continue;
            };
            let candidate = params + step;
            let trial = evaluate(problem, &candidate, false);
            if trial.cost.is_finite() && trial.cost < current.cost {
                let rel_change = (current.cost - trial.cost) / current.cost.max(f64::MIN_POSITIVE);
                params = candidate;
                current = evaluate(problem, &params, true);
                cost_history.push(current.cost);
                lambda /= problem.damping_factor;
                accepted = true;
                if rel_change < COST_TOLERANCE || step.amax() < STEP_TOLERANCE || current.cost == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= problem.damping_factor;
        }
        if !accepted {
            // No damping level reduces the cost: a local minimum to working precision.
            converged = current.jtr.amax() < 1e-6 * (1.0 + current.cost);
            break;
        }
    }
    let g = GaussianParams::from_vec(&params);
    let fitted: Vec<f64> = (0..problem.values.len())
        .map(|i| {
            let (x, y) = problem.coords(i);
            g.eval(x, y)
        })
        .collect();
    Ok(GaussianFit {
        amplitude: g.amplitude,
        center_x: g.center_x,
        center_y: g.center_y,
        sigma_x: g.sigma_x.abs(),
        sigma_y: g.sigma_y.abs(),
        r_squared: r_squared(&problem.values, &fitted)?,
        converged,
        iterations,
        final_cost: current.cost,
        cost_history,
    })
}

/// Synthesizes `g` on a `height x width` grid with origin `(0, 0)`.
pub fn render(g: &GaussianParams, height: usize, width: usize) -> Vec<f64> {
    (0..height * width).map(|i| g.eval((i % width) as f64, (i / width) as f64)).collect()
}
