use crate::{Error, Result};

/// One classical four-stage Runge-Kutta step from time `t`.
///
/// `deriv(t, y)` returns `dy/dt`. Any non-finite stage or result is reported
/// as a divergence at the time of the offending stage.
pub fn rk4_step<const N: usize, F>(y: &[f64; N], t: f64, dt: f64, mut deriv: F) -> Result<[f64; N]>
where
    F: FnMut(f64, &[f64; N]) -> Result<[f64; N]>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("rk4 step size must be > 0, got {dt}")));
    }
    let axpy = |a: f64, k: &[f64; N]| -> [f64; N] { std::array::from_fn(|i| y[i] + a * k[i]) };
    let check = |v: &[f64; N], time: f64| -> Result<()> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence {
                time,
                detail: format!("non-finite RK4 stage {v:?}"),
            })
        }
    };

    let k1 = deriv(t, y)?;
    check(&k1, t)?;
    let k2 = deriv(t + 0.5 * dt, &axpy(0.5 * dt, &k1))?;
    check(&k2, t + 0.5 * dt)?;
    let k3 = deriv(t + 0.5 * dt, &axpy(0.5 * dt, &k2))?;
    check(&k3, t + 0.5 * dt)?;
    let k4 = deriv(t + dt, &axpy(dt, &k3))?;
    check(&k4, t + dt)?;

    let next: [f64; N] =
        std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    check(&next, t + dt)?;
    Ok(next)
}
