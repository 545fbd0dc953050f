//! Dormand–Prince 5(4) embedded Runge–Kutta pair with PI step-size control.
//!
//! Only the single-step machinery lives here; the driver that handles
//! snapshots and stopping rules is in [`crate::dynamics`].

use nalgebra::DVector;

use crate::error::Result;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// difference between the 5th and 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Outcome of one trial step.
pub struct StepOutcome {
    pub y: DVector<f64>,
    /// Derivative at the new point (first stage of the next step).
    pub dy: DVector<f64>,
    pub error: DVector<f64>,
}

/// Takes one Dormand–Prince step of size `h` from `(t, y)`; `dy0 = f(t, y)`.
pub fn dp_step<F>(f: &mut F, t: f64, y: &DVector<f64>, dy0: &DVector<f64>, h: f64) -> Result<StepOutcome>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = dy0;
    let k2 = f(t + C2 * h, &(y + k1 * (h * A21)))?;
    let k3 = f(t + C3 * h, &(y + (k1 * A31 + &k2 * A32) * h))?;
    let k4 = f(t + C4 * h, &(y + (k1 * A41 + &k2 * A42 + &k3 * A43) * h))?;
    let k5 = f(t + C5 * h, &(y + (k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h))?;
    let k6 = f(t + h, &(y + (k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h))?;
    let y_new = y + (k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
    let k7 = f(t + h, &y_new)?;
    let error = (k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
    Ok(StepOutcome {
        y: y_new,
        dy: k7,
        error,
    })
}

/// Mixed absolute/relative RMS error norm.
pub fn error_norm(y0: &DVector<f64>, y1: &DVector<f64>, err: &DVector<f64>, rtol: f64, atol: f64) -> f64 {
    let n = y0.len().max(1) as f64;
    let sum: f64 = y0
        .iter()
        .zip(y1.iter())
        .zip(err.iter())
        .map(|((a, b), e)| {
            let sk = atol + rtol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

/// PI step-size controller (Hairer & Wanner's DOPRI5 variant).
#[derive(Debug, Clone)]
pub struct PiController {
    beta: f64,
    alpha: f64,
    safety: f64,
    fac_min: f64,
    fac_max: f64,
    err_old: f64,
}

impl Default for PiController {
    fn default() -> Self {
        let beta = 0.04;
        Self {
            beta,
            alpha: 0.2 - 0.75 * beta,
            safety: 0.9,
            fac_min: 0.2,
            fac_max: 10.0,
            err_old: 1e-4,
        }
    }
}

impl PiController {
    /// Step size to use after an accepted step with error norm `err <= 1`.
    pub fn accept(&mut self, h: f64, err: f64) -> f64 {
        let err = err.max(1e-10);
        let fac = self.safety * err.powf(-self.alpha) * self.err_old.powf(self.beta);
        self.err_old = err.max(1e-4);
        h * fac.clamp(self.fac_min, self.fac_max)
    }

    /// Step size to retry with after a rejected step (`err > 1`).
    pub fn reject(&mut self, h: f64, err: f64) -> f64 {
        let fac = if err.is_finite() {
            self.safety * err.powf(-self.alpha)
        } else {
            self.fac_min
        };
        h * fac.clamp(self.fac_min, 1.0)
    }
}

/// Starting step size heuristic (Hairer, Nørsett & Wanner, II.4).
pub fn initial_step<F>(f: &mut F, t: f64, y: &DVector<f64>, dy: &DVector<f64>, rtol: f64, atol: f64, h_max: f64) -> Result<f64>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let scale = y.map(|v| atol + rtol * v.abs());
    let rms = |v: &DVector<f64>| (v.component_div(&scale).norm_squared() / v.len().max(1) as f64).sqrt();
    let d0 = rms(y);
    let d1 = rms(dy);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(h_max);
    let dy1 = f(t + h0, &(y + dy * h0))?;
    let d2 = rms(&(dy1 - dy)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(h_max))
}
