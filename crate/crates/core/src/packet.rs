//! One-dimensional Gaussian wavepackets in a six-parameter canonical form
//! that is closed under free evolution.
//!
//! A packet with center `c`, width `sigma`, wavenumber `k`, phase `phi` and
//! chirp `chi` represents
//!
//! ```text
//! psi(x) = (2 pi sigma^2)^(-1/4)
//!          * exp(-(1 - i chi) (x - c)^2 / (4 sigma^2))
//!          * exp(i (k x + phi))
//! ```
//!
//! which is unit-norm for any chirp. `born_at` is the time at which these
//! parameters describe the packet; evolving to a later time updates the
//! parameters exactly (no grid, no quadrature).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PacketError {
    #[error("sigma must be positive, got {sigma}")]
    BadSigma { sigma: f64 },
    #[error("mass must be positive, got {mass}")]
    BadMass { mass: f64 },
    #[error("packet parameter {name} is not finite")]
    NotFinite { name: &'static str },
    #[error("cannot evolve backwards: target time {target} is before {born_at}")]
    BackwardsEvolution { target: f64, born_at: f64 },
}

/// Global physical constants of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub hbar: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        PhysicalParams { hbar: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPacket {
    pub center: f64,
    pub sigma: f64,
    pub wavenumber: f64,
    pub phase: f64,
    pub chirp: f64,
    /// Time at which the parameters above hold.
    pub born_at: f64,
}

impl GaussianPacket {
    pub fn new(center: f64, sigma: f64) -> Result<Self, PacketError> {
        GaussianPacket {
            center,
            sigma,
            wavenumber: 0.0,
            phase: 0.0,
            chirp: 0.0,
            born_at: 0.0,
        }
        .validated()
    }

    pub fn with_wavenumber(mut self, k: f64) -> Self {
        self.wavenumber = k;
        self
    }

    pub fn with_phase(mut self, phi: f64) -> Self {
        self.phase = phi;
        self
    }

    pub fn with_chirp(mut self, chi: f64) -> Self {
        self.chirp = chi;
        self
    }

    pub fn with_born_at(mut self, t: f64) -> Self {
        self.born_at = t;
        self
    }

    pub fn validated(self) -> Result<Self, PacketError> {
        for (name, v) in [
            ("center", self.center),
            ("sigma", self.sigma),
            ("wavenumber", self.wavenumber),
            ("phase", self.phase),
            ("chirp", self.chirp),
            ("born_at", self.born_at),
        ] {
            if !v.is_finite() {
                return Err(PacketError::NotFinite { name });
            }
        }
        if self.sigma <= 0.0 {
            return Err(PacketError::BadSigma { sigma: self.sigma });
        }
        Ok(self)
    }

    fn quad_coeff(&self) -> Complex64 {
        Complex64::new(1.0, -self.chirp) / (4.0 * self.sigma * self.sigma)
    }

    fn norm_const(&self) -> f64 {
        (2.0 * std::f64::consts::PI * self.sigma * self.sigma).powf(-0.25)
    }

    /// psi(x).
    pub fn evaluate(&self, x: f64) -> Complex64 {
        let d = x - self.center;
        let z = -self.quad_coeff() * d * d
            + Complex64::new(0.0, self.wavenumber * x + self.phase);
        self.norm_const() * z.exp()
    }

    /// d/dx log psi(x); the full gradient is `evaluate(x) * log_derivative(x)`.
    pub fn log_derivative(&self, x: f64) -> Complex64 {
        -2.0 * self.quad_coeff() * (x - self.center) + Complex64::new(0.0, self.wavenumber)
    }

    /// d psi / dx at x.
    pub fn gradient(&self, x: f64) -> Complex64 {
        self.evaluate(x) * self.log_derivative(x)
    }

    /// |psi(x)|^2.
    pub fn density(&self, x: f64) -> f64 {
        let d = x - self.center;
        let a = self.norm_const();
        a * a * (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Exact parameter update under free evolution to `t_target >= born_at`.
    ///
    /// With `theta = hbar (t_target - born_at) / (2 m sigma^2)`:
    /// the chirp becomes `chi + theta (1 + chi^2)`, the width grows by
    /// `sqrt((1 + theta chi)^2 + theta^2)`, the center drifts at the group
    /// velocity `hbar k / m`, and the phase is fixed by evaluating the exact
    /// propagated wavefunction at the new center.
    pub fn free_evolve(
        &self,
        params: PhysicalParams,
        mass: f64,
        t_target: f64,
    ) -> Result<GaussianPacket, PacketError> {
        if mass <= 0.0 {
            return Err(PacketError::BadMass { mass });
        }
        let t = t_target - self.born_at;
        if t < 0.0 {
            return Err(PacketError::BackwardsEvolution {
                target: t_target,
                born_at: self.born_at,
            });
        }
        if t == 0.0 {
            return Ok(*self);
        }
        let hbar = params.hbar;
        let (c, sigma, k, phi, chi) = (
            self.center,
            self.sigma,
            self.wavenumber,
            self.phase,
            self.chirp,
        );
        let theta = hbar * t / (2.0 * mass * sigma * sigma);
        let chi_new = chi + theta * (1.0 + chi * chi);
        let sigma_new = sigma * ((1.0 + theta * chi).powi(2) + theta * theta).sqrt();
        let c_new = c + hbar * k / mass * t;

        // Exact Gaussian propagation of the canonical form, evaluated at the
        // new center to extract the global phase.
        let a0 = self.quad_coeff();
        let eps = Complex64::new(0.0, hbar * t / (2.0 * mass));
        let d = Complex64::new(1.0, 0.0) + 4.0 * eps * a0;
        let vt = c_new - c;
        let exponent = -(a0 / d) * vt * vt + Complex64::new(0.0, k) * vt / d - eps * k * k / d;
        let val = self.norm_const()
            * Complex64::new(0.0, k * c + phi).exp()
            * d.sqrt().inv()
            * exponent.exp();
        let phi_new = val.arg() - k * c_new;

        GaussianPacket {
            center: c_new,
            sigma: sigma_new,
            wavenumber: k,
            phase: phi_new,
            chirp: chi_new,
            born_at: t_target,
        }
        .validated()
    }

    /// Exact overlap integral `<self|other> = int conj(self(x)) other(x) dx`.
    pub fn overlap(&self, other: &GaussianPacket) -> Complex64 {
        let a1c = self.quad_coeff().conj();
        let a2 = other.quad_coeff();
        let (c1, c2) = (self.center, other.center);
        let (k1, k2) = (self.wavenumber, other.wavenumber);
        let p = a1c + a2;
        let q = 2.0 * a1c * c1 + 2.0 * a2 * c2 + Complex64::new(0.0, k2 - k1);
        let r = -a1c * c1 * c1 - a2 * c2 * c2 + Complex64::new(0.0, other.phase - self.phase);
        let pi = std::f64::consts::PI;
        self.norm_const() * other.norm_const() * (pi / p).sqrt() * (q * q / (4.0 * p) + r).exp()
    }

    /// Truncated support `[center - n sigma, center + n sigma]`.
    pub fn support(&self, n_sigma: f64) -> (f64, f64) {
        (
            self.center - n_sigma * self.sigma,
            self.center + n_sigma * self.sigma,
        )
    }

    pub fn support_contains(&self, x: f64, n_sigma: f64) -> bool {
        (x - self.center).abs() <= n_sigma * self.sigma
    }

    /// Whether the truncated supports have a strictly positive gap
    /// (touching counts as overlapping).
    pub fn disjoint_from(&self, other: &GaussianPacket, n_sigma: f64) -> bool {
        (self.center - other.center).abs() > n_sigma * (self.sigma + other.sigma)
    }

    /// Same wavefunction parameters within `tol`, phases compared modulo
    /// 2 pi. `born_at` is ignored: callers must evolve both packets to a
    /// common time first, otherwise equal parameters mean different states.
    pub fn approx_eq(&self, other: &GaussianPacket, tol: f64) -> bool {
        let two_pi = 2.0 * std::f64::consts::PI;
        let dphi = (self.phase - other.phase).rem_euclid(two_pi);
        let dphi = dphi.min(two_pi - dphi);
        (self.center - other.center).abs() <= tol
            && (self.sigma - other.sigma).abs() <= tol
            && (self.wavenumber - other.wavenumber).abs() <= tol
            && (self.chirp - other.chirp).abs() <= tol
            && dphi <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const HBAR: PhysicalParams = PhysicalParams { hbar: 1.0 };

    fn quad_overlap(p1: &GaussianPacket, p2: &GaussianPacket) -> Complex64 {
        // Simpson quadrature over a generous window; independent of the
        // closed form under test.
        let lo = (p1.center - 12.0 * p1.sigma).min(p2.center - 12.0 * p2.sigma);
        let hi = (p1.center + 12.0 * p1.sigma).max(p2.center + 12.0 * p2.sigma);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| p1.evaluate(x).conj() * p2.evaluate(x);
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + i as f64 * h);
        }
        acc * (h / 3.0)
    }

    #[test]
    fn normalization() {
        for packet in [
            GaussianPacket::new(0.0, 1.0).unwrap(),
            GaussianPacket::new(-3.0, 0.25)
                .unwrap()
                .with_wavenumber(2.0)
                .with_chirp(1.5)
                .with_phase(0.7),
        ] {
            let n = quad_overlap(&packet, &packet);
            assert_relative_eq!(n.re, 1.0, max_relative = 1e-10);
            assert!(n.im.abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let packet = GaussianPacket::new(0.5, 0.8)
            .unwrap()
            .with_wavenumber(1.3)
            .with_chirp(-0.4)
            .with_phase(0.2);
        for x in [-1.0, 0.0, 0.5, 1.7, 3.0] {
            let h = 1e-5 * packet.sigma;
            let numeric = (packet.evaluate(x + h) - packet.evaluate(x - h)) / (2.0 * h);
            let exact = packet.gradient(x);
            assert!(
                (numeric - exact).norm() <= 1e-6 * exact.norm().max(1e-3),
                "x = {x}: {numeric} vs {exact}"
            );
        }
    }

    #[test]
    fn density_matches_evaluate() {
        let packet = GaussianPacket::new(1.0, 0.5)
            .unwrap()
            .with_wavenumber(-2.0)
            .with_chirp(0.9);
        for x in [-0.5, 0.7, 1.0, 2.4] {
            assert_relative_eq!(
                packet.density(x),
                packet.evaluate(x).norm_sqr(),
                max_relative = 1e-12
            );
        }
    }

    /// Spectral oracle: one exact kinetic step `exp(-i hbar k^2 t / (2 m))`
    /// applied in Fourier space, compared pointwise against the parameter
    /// update. Independent of the closed-form phase bookkeeping.
    fn fft_evolution_check(p0: GaussianPacket, mass: f64, t: f64) {
        use rustfft::FftPlanner;

        let n = 1 << 14;
        let spread = p0
            .free_evolve(HBAR, mass, p0.born_at + t)
            .unwrap();
        let half = 40.0 * spread.sigma.max(p0.sigma)
            + (p0.center.abs() + spread.center.abs())
            + 10.0;
        let l = 2.0 * half;
        let dx = l / n as f64;
        let xs: Vec<f64> = (0..n).map(|i| -half + i as f64 * dx).collect();
        let mut buf: Vec<rustfft::num_complex::Complex<f64>> =
            xs.iter().map(|x| p0.evaluate(*x)).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        for (i, v) in buf.iter_mut().enumerate() {
            let m = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            let kk = 2.0 * std::f64::consts::PI * m / l;
            let phase = -HBAR.hbar * kk * kk * t / (2.0 * mass);
            *v *= Complex64::new(0.0, phase).exp();
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        for v in buf.iter_mut() {
            *v /= n as f64;
        }
        let mut err2 = 0.0;
        for (x, got) in xs.iter().zip(&buf) {
            let want = spread.evaluate(*x);
            err2 += (got - want).norm_sqr() * dx;
        }
        assert!(
            err2.sqrt() < 1e-6,
            "L2 error {} for m={mass}, t={t}",
            err2.sqrt()
        );
    }

    #[test]
    fn free_evolution_matches_spectral_oracle() {
        fft_evolution_check(GaussianPacket::new(0.0, 1.0).unwrap(), 1.0, 1.5);
        fft_evolution_check(
            GaussianPacket::new(-2.0, 0.7)
                .unwrap()
                .with_wavenumber(1.2)
                .with_phase(0.4),
            1.0,
            2.0,
        );
        fft_evolution_check(
            GaussianPacket::new(1.0, 0.5)
                .unwrap()
                .with_wavenumber(-0.8)
                .with_chirp(0.9)
                .with_phase(-1.1),
            2.0,
            1.0,
        );
        fft_evolution_check(
            GaussianPacket::new(0.0, 0.25)
                .unwrap()
                .with_chirp(-1.3)
                .with_wavenumber(0.6),
            4.0,
            0.8,
        );
    }

    #[test]
    fn evolution_composes() {
        let p0 = GaussianPacket::new(0.3, 0.9)
            .unwrap()
            .with_wavenumber(0.7)
            .with_chirp(0.2)
            .with_phase(1.0);
        let one_step = p0.free_evolve(HBAR, 1.5, 2.4).unwrap();
        let two_step = p0
            .free_evolve(HBAR, 1.5, 1.1)
            .unwrap()
            .free_evolve(HBAR, 1.5, 2.4)
            .unwrap();
        for x in [-1.0, 0.0, 1.0, 2.0] {
            assert!((one_step.evaluate(x) - two_step.evaluate(x)).norm() < 1e-12);
        }
        assert!(one_step.approx_eq(&two_step, 1e-10));
    }

    #[test]
    fn width_doubles_at_the_exact_time() {
        // sigma(t) = sigma sqrt(1 + theta^2) for chi = 0 doubles when
        // theta = sqrt(3).
        let sigma = 0.6;
        let mass = 1.3;
        let p0 = GaussianPacket::new(0.0, sigma).unwrap();
        let t = 3f64.sqrt() * 2.0 * mass * sigma * sigma / HBAR.hbar;
        let p1 = p0.free_evolve(HBAR, mass, t).unwrap();
        assert_relative_eq!(p1.sigma, 2.0 * sigma, max_relative = 1e-12);
        assert_relative_eq!(p1.chirp, 3f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn group_velocity_drift() {
        let p0 = GaussianPacket::new(-1.0, 1.0).unwrap().with_wavenumber(2.5);
        let p1 = p0.free_evolve(HBAR, 2.0, 3.0).unwrap();
        assert_relative_eq!(p1.center, -1.0 + 2.5 / 2.0 * 3.0, max_relative = 1e-12);
        assert_eq!(p1.wavenumber, 2.5);
        assert_eq!(p1.born_at, 3.0);
    }

    #[test]
    fn evolution_preserves_norm_via_overlap() {
        let p0 = GaussianPacket::new(0.0, 0.5)
            .unwrap()
            .with_wavenumber(1.0)
            .with_chirp(0.5);
        let p1 = p0.free_evolve(HBAR, 1.0, 2.0).unwrap();
        let n = p1.overlap(&p1);
        assert_relative_eq!(n.re, 1.0, max_relative = 1e-12);
        assert!(n.im.abs() < 1e-12);
    }

    #[test]
    fn overlap_matches_quadrature() {
        let p1 = GaussianPacket::new(0.0, 1.0)
            .unwrap()
            .with_wavenumber(0.5)
            .with_phase(0.3);
        let p2 = GaussianPacket::new(1.5, 0.8)
            .unwrap()
            .with_wavenumber(-0.7)
            .with_chirp(0.6)
            .with_phase(-0.2);
        let closed = p1.overlap(&p2);
        let quad = quad_overlap(&p1, &p2);
        assert!((closed - quad).norm() < 1e-10, "{closed} vs {quad}");
        // Hermitian symmetry.
        let swapped = p2.overlap(&p1);
        assert!((closed.conj() - swapped).norm() < 1e-12);
    }

    #[test]
    fn overlap_is_invariant_under_joint_evolution() {
        let p1 = GaussianPacket::new(0.0, 1.0).unwrap().with_wavenumber(0.4);
        let p2 = GaussianPacket::new(2.0, 0.6).unwrap().with_chirp(-0.3);
        let before = p1.overlap(&p2);
        let q1 = p1.free_evolve(HBAR, 1.2, 2.0).unwrap();
        let q2 = p2.free_evolve(HBAR, 1.2, 2.0).unwrap();
        let after = q1.overlap(&q2);
        assert!((before - after).norm() < 1e-12, "{before} vs {after}");
    }

    #[test]
    fn support_and_disjointness() {
        let p1 = GaussianPacket::new(0.0, 1.0).unwrap();
        let p2 = GaussianPacket::new(10.0, 1.0).unwrap();
        assert!(p1.disjoint_from(&p2, 4.9));
        assert!(!p1.disjoint_from(&p2, 5.0)); // touching counts as overlap
        assert_eq!(p1.support(5.0), (-5.0, 5.0));
        assert!(p1.support_contains(4.99, 5.0));
        assert!(!p1.support_contains(5.01, 5.0));
    }

    #[test]
    fn validation_errors() {
        assert_eq!(
            GaussianPacket::new(0.0, 0.0).unwrap_err(),
            PacketError::BadSigma { sigma: 0.0 }
        );
        assert_eq!(
            GaussianPacket::new(f64::NAN, 1.0).unwrap_err(),
            PacketError::NotFinite { name: "center" }
        );
        let p = GaussianPacket::new(0.0, 1.0).unwrap().with_born_at(1.0);
        assert_eq!(
            p.free_evolve(HBAR, 1.0, 0.5).unwrap_err(),
            PacketError::BackwardsEvolution {
                target: 0.5,
                born_at: 1.0
            }
        );
        assert_eq!(
            p.free_evolve(HBAR, 0.0, 2.0).unwrap_err(),
            PacketError::BadMass { mass: 0.0 }
        );
    }

    #[test]
    fn phase_comparison_wraps() {
        let p1 = GaussianPacket::new(0.0, 1.0).unwrap().with_phase(3.14);
        let p2 = GaussianPacket::new(0.0, 1.0)
            .unwrap()
            .with_phase(3.14 - 2.0 * std::f64::consts::PI);
        assert!(p1.approx_eq(&p2, 1e-12));
    }
}
