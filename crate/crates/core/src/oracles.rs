//! Closed-form values and bounds for the power-law equation
//! `-dY = -Y|Y|^q dt + ...` and for the fixed-point scheme.

/// `Ξ^m_t = (q(T - t) + m^{-q})^{-1/q}`, the solution of `y' = y|y|^q`
/// backward from `y(T) = m`. `m = +∞` gives `(q(T - t))^{-1/q}`.
pub fn xi(q: f64, tau: f64, m: f64) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    (q * tau + m.powf(-q)).powf(-1.0 / q)
}

/// `(q(T - t))^{-1/q}`, the level-free a priori bound.
pub fn apriori_bound(q: f64, tau: f64) -> f64 {
    (q * tau).powf(-1.0 / q)
}

/// `κ = (1 + K_g T) / (1 - ε)`.
pub fn kappa(kg: f64, t_end: f64, eps: f64) -> f64 {
    (1.0 + kg * t_end) / (1.0 - eps)
}

/// Bound on `E ∫_0^T (T - s)^{2/q} |Z_s|² ds`: `(8 + K_g T) / (1 - ε) · q^{-2/q}`.
pub fn sharp_z_bound(kg: f64, t_end: f64, eps: f64, q: f64) -> f64 {
    (8.0 + kg * t_end) / (1.0 - eps) * q.powf(-2.0 / q)
}

/// Bound on `E ∫_0^t |Z_r|² dr`: `κ / (q(T - t))^{2/q}`.
pub fn truncated_z_bound(kappa: f64, q: f64, tau: f64) -> f64 {
    kappa / (q * tau).powf(2.0 / q)
}

/// Bound on `E |Ỹ^{n,m}_t - Y^n_t|²`: `e^{(1 + K_g) T} / m²`.
pub fn floor_gap_bound(kg: f64, t_end: f64, m: f64) -> f64 {
    ((1.0 + kg) * t_end).exp() / (m * m)
}

/// Default weight exponent `α = 2μ + 2K_f/(1-ε) + 2K_g/(1+ε)`.
pub fn picard_alpha(mu: f64, kf: f64, kg: f64, eps: f64) -> f64 {
    2.0 * mu + 2.0 * kf / (1.0 - eps) + 2.0 * kg / (1.0 + eps)
}

/// Default `η = 2/(1-ε)`.
pub fn picard_eta(eps: f64) -> f64 {
    2.0 / (1.0 - eps)
}

/// Contraction factor `(1+ε)/2`.
pub fn picard_factor(eps: f64) -> f64 {
    0.5 * (1.0 + eps)
}

/// Exact flow of `y' = y|y|^q` backward over `dt` from `c`:
/// `sign(c) (q dt + |c|^{-q})^{-1/q}`.
pub fn power_flow(c: f64, q: f64, dt: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    c.signum() * xi(q, dt, c.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert!((xi(1.0, 1.0, 2.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((apriori_bound(2.0, 0.5) - 1.0).abs() < 1e-15);
        assert!((xi(1.0, 0.25, 2.0) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(xi(1.0, 0.5, f64::INFINITY), apriori_bound(1.0, 0.5));
        assert_eq!(kappa(0.0, 3.0, 0.0), 1.0);
        assert_eq!(sharp_z_bound(0.0, 1.0, 0.0, 1.0), 8.0);
        assert!((picard_factor(0.25) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn flow_composes() {
        // Two half steps equal one full step.
        let a = power_flow(power_flow(3.0, 1.5, 0.1), 1.5, 0.1);
        let b = power_flow(3.0, 1.5, 0.2);
        assert!((a - b).abs() < 1e-14);
        assert!(power_flow(-2.0, 1.0, 0.3) < 0.0);
        assert!(power_flow(5.0, 2.0, 0.1) < 5.0);
    }
}
