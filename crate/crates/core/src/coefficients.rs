//! Equation coefficients `b, σ, f, g`, their metadata, the builtin families
//! and first-order derivative weights.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Read-only view of one path up to the evaluation node.
///
/// For `b`, `σ` and `f` evaluated at node `r`, `x` (and `w`, `y` when present)
/// hold the values at nodes `0..=r`, so a coefficient cannot look ahead. For
/// `g` they hold the whole path.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub x: &'a [f64],
    pub w: &'a [f64],
    pub y: Option<&'a [f64]>,
    pub dt: f64,
}

impl<'a> PathView<'a> {
    pub fn new(x: &'a [f64], w: &'a [f64], dt: f64) -> Self {
        Self { x, w, y: None, dt }
    }

    /// Restriction to nodes `0..=r`.
    pub fn prefix(&self, r: usize) -> PathView<'a> {
        PathView {
            x: &self.x[..=r],
            w: &self.w[..=r.min(self.w.len().saturating_sub(1))],
            y: self.y.map(|y| &y[..=r.min(y.len().saturating_sub(1))]),
            dt: self.dt,
        }
    }

    /// Index of the last visible node.
    #[inline]
    pub fn last_index(&self) -> usize {
        self.x.len() - 1
    }

    /// State at the last visible node.
    #[inline]
    pub fn x_now(&self) -> f64 {
        self.x[self.x.len() - 1]
    }

    #[inline]
    pub fn w_now(&self) -> f64 {
        self.w.last().copied().unwrap_or(0.0)
    }

    /// Forward-coupling value at the last visible node (0 when absent).
    #[inline]
    pub fn y_now(&self) -> f64 {
        self.y.and_then(|y| y.last().copied()).unwrap_or(0.0)
    }
}

pub type KernelFn = Arc<dyn Fn(f64, f64, &PathView) -> f64 + Send + Sync>;
pub type DriverFn = Arc<dyn Fn(f64, f64, &PathView, f64, f64, Option<f64>) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64, &PathView) -> f64 + Send + Sync>;
pub type PointFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type DriverPointFn = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type WeightFn = Arc<dyn Fn(f64, &PathView, &mut [f64]) + Send + Sync>;

/// Declared properties of a coefficient set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metadata {
    pub lipschitz_y: f64,
    pub lipschitz_z: f64,
    pub monotone_in_y: bool,
    /// `b, σ, f` read the path only through `x_r`.
    pub state_dependent: bool,
    /// `f` uses `z2`.
    pub type2: bool,
    /// `b, σ` depend on `(t, r)` only.
    pub deterministic_forward: bool,
    /// `b, σ` read the backward diagonal through [`PathView::y`].
    pub coupled: bool,
}

/// Deterministic Volterra kernels for the forward noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// `c (t - r)^{H - 1/2}`.
    Fractional { hurst: f64, scale: f64 },
    /// `e^{-λ (t - r)}`.
    Exponential { rate: f64 },
    Constant { value: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Fractional { hurst, scale } => {
                if !(hurst > 0.0 && hurst < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "H must lie in (0,1), got {hurst}"
                    )));
                }
                if !scale.is_finite() {
                    return Err(Error::InvalidParameter("kernel scale must be finite".into()));
                }
            }
            KernelSpec::Exponential { rate } => {
                if !rate.is_finite() {
                    return Err(Error::InvalidParameter("kernel rate must be finite".into()));
                }
            }
            KernelSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::InvalidParameter("kernel value must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Blows up on the diagonal.
    pub fn is_singular(&self) -> bool {
        matches!(*self, KernelSpec::Fractional { hurst, .. } if hurst < 0.5)
    }

    /// Kernel value at lag `t - r`. The diagonal `t = r` evaluates to 0 for
    /// fractional kernels; the explicit scheme never needs it.
    pub fn eval(&self, lag: f64) -> f64 {
        match *self {
            KernelSpec::Fractional { hurst, scale } => {
                if lag <= 0.0 {
                    0.0
                } else {
                    scale * lag.powf(hurst - 0.5)
                }
            }
            KernelSpec::Exponential { rate } => (-rate * lag).exp(),
            KernelSpec::Constant { value } => value,
        }
    }
}

/// `Y_t = ξ_t + ∫_t^T [α(t,r) Y_r + β(t,r) Z^t_r] dr − ∫_t^T Z^t_r dW_r`
/// with deterministic `α, β` and a free term read from the state path.
#[derive(Clone)]
pub struct LinearBSVIESpec {
    pub name: String,
    pub alpha: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub beta: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub xi: TerminalFn,
    /// `β ≡ 0` and `ξ` does not depend on the path.
    pub deterministic: bool,
}

impl fmt::Debug for LinearBSVIESpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearBSVIESpec")
            .field("name", &self.name)
            .field("deterministic", &self.deterministic)
            .finish()
    }
}

impl LinearBSVIESpec {
    /// Coefficient set of the equation, driven by `X = x0 + W`.
    pub fn coefficients(&self) -> CoefficientSet {
        let alpha = self.alpha.clone();
        let beta = self.beta.clone();
        let xi = self.xi.clone();
        let (ab, bb) = (self.alpha.clone(), self.beta.clone());
        let xi_w = self.xi.clone();
        let mut c = CoefficientSet::new(
            &format!("linear-volterra/{}", self.name),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _| 1.0),
            Arc::new(move |t, r, _, y, z, _| alpha(t, r) * y + beta(t, r) * z),
            Arc::new(move |t, v| xi(t, v)),
        );
        c.meta = Metadata {
            lipschitz_y: f64::NAN,
            lipschitz_z: f64::NAN,
            monotone_in_y: false,
            state_dependent: false,
            type2: false,
            deterministic_forward: true,
            coupled: false,
        };
        c.kernel = Some(KernelSpec::Constant { value: 1.0 });
        c.linear = Some(LinearBSVIESpec {
            name: self.name.clone(),
            alpha: ab,
            beta: bb,
            xi: xi_w,
            deterministic: self.deterministic,
        });
        c
    }
}

/// Analytic first-order derivatives of a state-dependent coefficient set.
/// `b, σ, f` carry their mass at the evaluation node; `g` fills a weight
/// vector over all grid nodes.
#[derive(Clone)]
pub struct DerivativeWeights {
    pub db: PointFn,
    pub dsigma: PointFn,
    pub df_x: DriverPointFn,
    pub df_y: DriverPointFn,
    pub df_z: DriverPointFn,
    pub dg: WeightFn,
    /// `f` is affine in `(y, z)`, so `∂ₓf, ∂_y f, ∂_z f` ignore their `y, z`
    /// arguments.
    pub driver_affine: bool,
}

impl fmt::Debug for DerivativeWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DerivativeWeights")
    }
}

impl DerivativeWeights {
    /// Node weights of `Dg(t, x)` on a path with `x.len()` nodes.
    pub fn dg_weights(&self, t: f64, view: &PathView) -> Vec<f64> {
        let mut w = vec![0.0; view.x.len()];
        (self.dg)(t, view, &mut w);
        w
    }
}

/// `b, σ, f, g` with metadata.
#[derive(Clone)]
pub struct CoefficientSet {
    pub name: String,
    pub b: KernelFn,
    pub sigma: KernelFn,
    pub f: DriverFn,
    pub g: TerminalFn,
    pub meta: Metadata,
    pub kernel: Option<KernelSpec>,
    pub derivatives: Option<DerivativeWeights>,
    pub linear: Option<LinearBSVIESpec>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("meta", &self.meta)
            .field("kernel", &self.kernel)
            .finish()
    }
}

impl CoefficientSet {
    pub fn new(name: &str, b: KernelFn, sigma: KernelFn, f: DriverFn, g: TerminalFn) -> Self {
        Self {
            name: name.to_string(),
            b,
            sigma,
            f,
            g,
            meta: Metadata::default(),
            kernel: None,
            derivatives: None,
            linear: None,
        }
    }

    /// Replaces the driver by `f + shift`.
    pub fn shift_driver(mut self, shift: f64) -> Self {
        let f = self.f.clone();
        self.f = Arc::new(move |t, r, v, y, z, z2| f(t, r, v, y, z, z2) + shift);
        self
    }

    /// Replaces the terminal by `g + shift`.
    pub fn shift_terminal(mut self, shift: f64) -> Self {
        let g = self.g.clone();
        self.g = Arc::new(move |t, v| g(t, v) + shift);
        self
    }
}

/// Builtin family parameters: string values keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params(pub BTreeMap<String, String>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    fn check_keys(&self, family: &str, allowed: &[&str]) -> Result<()> {
        for k in self.0.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::InvalidParameter(format!(
                    "unknown parameter '{k}' for family '{family}'"
                )));
            }
        }
        Ok(())
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(s) => s.trim().parse::<f64>().map_err(|_| {
                Error::InvalidParameter(format!("parameter '{key}' is not a number: '{s}'"))
            }),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.0.get(key).map(String::as_str).unwrap_or(default)
    }
}

pub const BUILTIN_NAMES: &[&str] = &[
    "zero",
    "bm",
    "fbm",
    "linear-volterra",
    "state-lipschitz",
    "type2-linear",
    "coupled",
];

/// Builds a named coefficient family.
pub fn builtin(name: &str, params: &Params) -> Result<CoefficientSet> {
    match name {
        "zero" => {
            params.check_keys(name, &[])?;
            Ok(zero())
        }
        "bm" => {
            params.check_keys(name, &[])?;
            Ok(bm())
        }
        "fbm" => {
            params.check_keys(name, &["H", "c"])?;
            fbm(params.f64_or("H", 0.7)?, params.f64_or("c", 1.0)?)
        }
        "linear-volterra" => {
            params.check_keys(name, &["variant"])?;
            let spec = linear_spec(params.str_or("variant", "full"))?;
            Ok(spec.coefficients())
        }
        "state-lipschitz" => {
            params.check_keys(name, &["kappa_y", "kappa_z", "shift_f", "shift_g"])?;
            Ok(state_lipschitz(
                params.f64_or("kappa_y", 0.25)?,
                params.f64_or("kappa_z", 0.1)?,
            )
            .shift_driver(params.f64_or("shift_f", 0.0)?)
            .shift_terminal(params.f64_or("shift_g", 0.0)?))
        }
        "type2-linear" => {
            params.check_keys(name, &["a", "c"])?;
            Ok(type2_linear(params.f64_or("a", 0.3)?, params.f64_or("c", 0.5)?))
        }
        "coupled" => {
            params.check_keys(name, &["kappa"])?;
            Ok(coupled(params.f64_or("kappa", 0.2)?))
        }
        _ => Err(Error::Unknown {
            kind: "coefficient family",
            name: name.to_string(),
        }),
    }
}

fn terminal_unit_weight() -> WeightFn {
    Arc::new(|_, v, w| {
        let n = v.x.len();
        w[n - 1] = 1.0;
    })
}

fn zero_derivatives() -> DerivativeWeights {
    DerivativeWeights {
        db: Arc::new(|_, _, _| 0.0),
        dsigma: Arc::new(|_, _, _| 0.0),
        df_x: Arc::new(|_, _, _, _, _| 0.0),
        df_y: Arc::new(|_, _, _, _, _| 0.0),
        df_z: Arc::new(|_, _, _, _, _| 0.0),
        dg: Arc::new(|_, _, _| {}),
        driver_affine: true,
    }
}

/// All coefficients zero.
pub fn zero() -> CoefficientSet {
    let mut c = CoefficientSet::new(
        "zero",
        Arc::new(|_, _, _| 0.0),
        Arc::new(|_, _, _| 0.0),
        Arc::new(|_, _, _, _, _, _| 0.0),
        Arc::new(|_, _| 0.0),
    );
    c.meta = Metadata {
        lipschitz_y: 0.0,
        lipschitz_z: 0.0,
        monotone_in_y: true,
        state_dependent: true,
        deterministic_forward: true,
        ..Metadata::default()
    };
    c.kernel = Some(KernelSpec::Constant { value: 0.0 });
    c.derivatives = Some(zero_derivatives());
    c
}

/// `X = x0 + W`, `f = 0`, `g(t, x) = x_T`.
pub fn bm() -> CoefficientSet {
    let mut c = CoefficientSet::new(
        "bm",
        Arc::new(|_, _, _| 0.0),
        Arc::new(|_, _, _| 1.0),
        Arc::new(|_, _, _, _, _, _| 0.0),
        Arc::new(|_, v| v.x_now()),
    );
    c.meta = Metadata {
        lipschitz_y: 0.0,
        lipschitz_z: 0.0,
        monotone_in_y: true,
        state_dependent: true,
        deterministic_forward: true,
        ..Metadata::default()
    };
    c.kernel = Some(KernelSpec::Constant { value: 1.0 });
    c.derivatives = Some(DerivativeWeights {
        dg: terminal_unit_weight(),
        ..zero_derivatives()
    });
    c
}

/// Riemann–Liouville fractional process `σ(t, r) = c (t − r)^{H − 1/2}`,
/// `f = 0`, `g(t, x) = x_T²`.
pub fn fbm(hurst: f64, scale: f64) -> Result<CoefficientSet> {
    let kernel = KernelSpec::Fractional { hurst, scale };
    kernel.validate()?;
    let mut c = CoefficientSet::new(
        "fbm",
        Arc::new(|_, _, _| 0.0),
        Arc::new(move |t, r, _| kernel.eval(t - r)),
        Arc::new(|_, _, _, _, _, _| 0.0),
        Arc::new(|_, v| v.x_now() * v.x_now()),
    );
    c.meta = Metadata {
        lipschitz_y: 0.0,
        lipschitz_z: 0.0,
        monotone_in_y: true,
        state_dependent: true,
        deterministic_forward: true,
        ..Metadata::default()
    };
    c.kernel = Some(kernel);
    c.derivatives = Some(DerivativeWeights {
        dg: Arc::new(|_, v, w| {
            let n = v.x.len();
            w[n - 1] = 2.0 * v.x[n - 1];
        }),
        ..zero_derivatives()
    });
    Ok(c)
}

/// Names accepted by [`linear_spec`].
pub const LINEAR_VARIANTS: &[&str] = &["deterministic", "random-xi", "full"];

/// Shipped linear specifications.
///
/// * `deterministic`: `α = 0.5 e^{−(r−t)}`, `β = 0`, `ξ_t = 1 + t`.
/// * `random-xi`: `α = 0.4`, `β = 0`, `ξ_t = 1 + t x_T²`.
/// * `full`: `α = 0.3 (1 + t)`, `β = 0.4 e^{−r}`, `ξ_t = 1 + x_T² + t x_T`.
pub fn linear_spec(variant: &str) -> Result<LinearBSVIESpec> {
    let spec = match variant {
        "deterministic" => LinearBSVIESpec {
            name: variant.into(),
            alpha: Arc::new(|t, r| 0.5 * (-(r - t)).exp()),
            beta: Arc::new(|_, _| 0.0),
            xi: Arc::new(|t, _| 1.0 + t),
            deterministic: true,
        },
        "random-xi" => LinearBSVIESpec {
            name: variant.into(),
            alpha: Arc::new(|_, _| 0.4),
            beta: Arc::new(|_, _| 0.0),
            xi: Arc::new(|t, v| 1.0 + t * v.x_now() * v.x_now()),
            deterministic: false,
        },
        "full" => LinearBSVIESpec {
            name: variant.into(),
            alpha: Arc::new(|t, _| 0.3 * (1.0 + t)),
            beta: Arc::new(|_, r| 0.4 * (-r).exp()),
            xi: Arc::new(|t, v| {
                let x = v.x_now();
                1.0 + x * x + t * x
            }),
            deterministic: false,
        },
        _ => {
            return Err(Error::Unknown {
                kind: "linear variant",
                name: variant.to_string(),
            })
        }
    };
    Ok(spec)
}

/// Names accepted by [`linear_from_selectors`] for `α`.
pub const ALPHA_NAMES: &[&str] = &["zero", "const", "exp-decay", "affine-t"];
/// Names accepted by [`linear_from_selectors`] for `β`.
pub const BETA_NAMES: &[&str] = &["zero", "const", "exp-r"];
/// Names accepted by [`linear_from_selectors`] for `ξ`.
pub const XI_NAMES: &[&str] = &["one-plus-t", "t-square", "quadratic"];

type Kernel2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

fn alpha_named(name: &str) -> Result<Kernel2> {
    Ok(match name {
        "zero" => Arc::new(|_, _| 0.0),
        "const" => Arc::new(|_, _| 0.4),
        "exp-decay" => Arc::new(|t, r| 0.5 * (-(r - t)).exp()),
        "affine-t" => Arc::new(|t, _| 0.3 * (1.0 + t)),
        _ => return Err(Error::Unknown { kind: "alpha", name: name.into() }),
    })
}

fn beta_named(name: &str) -> Result<Kernel2> {
    Ok(match name {
        "zero" => Arc::new(|_, _| 0.0),
        "const" => Arc::new(|_, _| 0.3),
        "exp-r" => Arc::new(|_, r| 0.4 * (-r).exp()),
        _ => return Err(Error::Unknown { kind: "beta", name: name.into() }),
    })
}

fn xi_named(name: &str) -> Result<(TerminalFn, bool)> {
    Ok(match name {
        "one-plus-t" => (Arc::new(|t, _| 1.0 + t), true),
        "t-square" => (Arc::new(|t, v| 1.0 + t * v.x_now() * v.x_now()), false),
        "quadratic" => (
            Arc::new(|t, v| {
                let x = v.x_now();
                1.0 + x * x + t * x
            }),
            false,
        ),
        _ => return Err(Error::Unknown { kind: "xi", name: name.into() }),
    })
}

/// Linear spec assembled from named `α`, `β` and `ξ`:
///
/// * `α`: `zero`, `const` (0.4), `exp-decay` (`0.5 e^{−(r−t)}`), `affine-t` (`0.3 (1 + t)`)
/// * `β`: `zero`, `const` (0.3), `exp-r` (`0.4 e^{−r}`)
/// * `ξ`: `one-plus-t` (`1 + t`), `t-square` (`1 + t x_T²`), `quadratic` (`1 + x_T² + t x_T`)
pub fn linear_from_selectors(alpha: &str, beta: &str, xi: &str) -> Result<LinearBSVIESpec> {
    let (xi_fn, xi_det) = xi_named(xi)?;
    Ok(LinearBSVIESpec {
        name: format!("{alpha}/{beta}/{xi}"),
        alpha: alpha_named(alpha)?,
        beta: beta_named(beta)?,
        xi: xi_fn,
        deterministic: beta == "zero" && xi_det,
    })
}

/// Linear spec with constant `α = a`, `β = 0` and `ξ ≡ c`.
pub fn constant_linear_spec(a: f64, c: f64) -> LinearBSVIESpec {
    LinearBSVIESpec {
        name: format!("constant(a={a},c={c})"),
        alpha: Arc::new(move |_, _| a),
        beta: Arc::new(|_, _| 0.0),
        xi: Arc::new(move |_, _| c),
        deterministic: true,
    }
}

/// State-dependent Lipschitz family:
///
/// * `b(t, r, x) = −0.3 e^{−(t−r)} x_r`
/// * `σ(t, r, x) = 0.4 e^{−(t−r)/2} (1 + 0.25 cos x_r)`
/// * `f(t, r, x, y, z) = 0.5 (1 + t/2) cos x_r + κ_y y + κ_z z`
/// * `g(t, x) = (1 + t/2)(x_T/2 + cos(x_T)/4) + 0.2 ∫_0^T x_s ds` (trapezoid)
pub fn state_lipschitz(kappa_y: f64, kappa_z: f64) -> CoefficientSet {
    let mut c = CoefficientSet::new(
        "state-lipschitz",
        Arc::new(|t, r, v| -0.3 * (-(t - r)).exp() * v.x_now()),
        Arc::new(|t, r, v| 0.4 * (-0.5 * (t - r)).exp() * (1.0 + 0.25 * v.x_now().cos())),
        Arc::new(move |t, _, v, y, z, _| {
            0.5 * (1.0 + 0.5 * t) * v.x_now().cos() + kappa_y * y + kappa_z * z
        }),
        Arc::new(|t, v| {
            let xt = v.x_now();
            (1.0 + 0.5 * t) * (0.5 * xt + 0.25 * xt.cos()) + 0.2 * trapezoid(v.x, v.dt)
        }),
    );
    c.meta = Metadata {
        lipschitz_y: kappa_y.abs(),
        lipschitz_z: kappa_z.abs(),
        monotone_in_y: kappa_y >= 0.0,
        state_dependent: true,
        deterministic_forward: false,
        ..Metadata::default()
    };
    c.derivatives = Some(DerivativeWeights {
        db: Arc::new(|t, r, _| -0.3 * (-(t - r)).exp()),
        dsigma: Arc::new(|t, r, x| -0.1 * (-0.5 * (t - r)).exp() * x.sin()),
        df_x: Arc::new(|t, _, x, _, _| -0.5 * (1.0 + 0.5 * t) * x.sin()),
        df_y: Arc::new(move |_, _, _, _, _| kappa_y),
        df_z: Arc::new(move |_, _, _, _, _| kappa_z),
        dg: Arc::new(|t, v, w| {
            let n = v.x.len();
            trapezoid_weights(v.dt, w, 0.2);
            let xt = v.x[n - 1];
            w[n - 1] += (1.0 + 0.5 * t) * (0.5 - 0.25 * xt.sin());
        }),
        driver_affine: true,
    });
    c
}

/// Type-II family on `X = x0 + W`:
/// `f(t, r, x, y, z, z2) = a y + c z2 + 0.2 cos x_r`, `g(t, x) = x_T + t sin x_T`.
pub fn type2_linear(a: f64, c2: f64) -> CoefficientSet {
    let mut c = CoefficientSet::new(
        "type2-linear",
        Arc::new(|_, _, _| 0.0),
        Arc::new(|_, _, _| 1.0),
        Arc::new(move |_, _, v, y, _, z2| a * y + c2 * z2.unwrap_or(0.0) + 0.2 * v.x_now().cos()),
        Arc::new(|t, v| v.x_now() + t * v.x_now().sin()),
    );
    c.meta = Metadata {
        lipschitz_y: a.abs(),
        lipschitz_z: 0.0,
        monotone_in_y: a >= 0.0,
        state_dependent: true,
        type2: true,
        deterministic_forward: true,
        coupled: false,
    };
    c.kernel = Some(KernelSpec::Constant { value: 1.0 });
    c
}

/// Coupled family: `b(t, r, x, y) = κ y_r`, `σ = 1`,
/// `f(t, r, x, y) = 0.5 cos x_r − 0.2 y`, `g(t, x) = x_T/2 + t/4`.
pub fn coupled(kappa: f64) -> CoefficientSet {
    let mut c = CoefficientSet::new(
        "coupled",
        Arc::new(move |_, _, v| kappa * v.y_now()),
        Arc::new(|_, _, _| 1.0),
        Arc::new(|_, _, v, y, _, _| 0.5 * v.x_now().cos() - 0.2 * y),
        Arc::new(|t, v| 0.5 * v.x_now() + 0.25 * t),
    );
    c.meta = Metadata {
        lipschitz_y: 0.2,
        lipschitz_z: 0.0,
        monotone_in_y: false,
        state_dependent: true,
        type2: false,
        deterministic_forward: false,
        coupled: kappa != 0.0,
    };
    c
}

/// Trapezoid rule on a uniform grid.
pub fn trapezoid(x: &[f64], dt: f64) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = x[1..n - 1].iter().sum();
    dt * (0.5 * x[0] + inner + 0.5 * x[n - 1])
}

/// Adds `scale ×` trapezoid weights to `w`.
pub fn trapezoid_weights(dt: f64, w: &mut [f64], scale: f64) {
    let n = w.len();
    if n < 2 {
        return;
    }
    for (k, wk) in w.iter_mut().enumerate() {
        let q = if k == 0 || k == n - 1 { 0.5 * dt } else { dt };
        *wk += scale * q;
    }
}

/// Returns the derivative weights, or an error when none were supplied for a
/// state-dependent set.
pub fn derivative_weights(coeffs: &CoefficientSet) -> Result<&DerivativeWeights> {
    if !coeffs.meta.state_dependent {
        return Err(Error::Unsupported(format!(
            "'{}' is path-dependent; Fréchet derivatives are only supported for state-dependent coefficients",
            coeffs.name
        )));
    }
    coeffs.derivatives.as_ref().ok_or_else(|| {
        Error::Unsupported(format!("'{}' carries no derivative weights", coeffs.name))
    })
}

/// Outcome of a coefficient probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub name: &'static str,
    pub pass: bool,
    pub worst: f64,
    pub samples: usize,
}

fn random_path(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(n);
    let mut v = rng.gen_range(-1.0..1.0);
    for _ in 0..n {
        x.push(v);
        v += rng.gen_range(-0.3..0.3);
    }
    x
}

/// Evaluates `b`, `σ` and `f` on random path pairs that agree up to the
/// evaluation node and differ afterwards; reports the largest difference.
pub fn probe_adaptedness(coeffs: &CoefficientSet, n_nodes: usize, samples: usize, seed: u64) -> ProbeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / (n_nodes - 1) as f64;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let a = random_path(&mut rng, n_nodes);
        let mut b = a.clone();
        let r = rng.gen_range(0..n_nodes);
        for v in b[r + 1..].iter_mut() {
            *v += rng.gen_range(-2.0..2.0);
        }
        let ya = random_path(&mut rng, n_nodes);
        let mut yb = ya.clone();
        for v in yb[r + 1..].iter_mut() {
            *v -= 1.0;
        }
        let t = rng.gen_range(r..n_nodes) as f64 * dt;
        let rt = r as f64 * dt;
        let mut va = PathView::new(&a, &a, dt);
        va.y = Some(&ya);
        let mut vb = PathView::new(&b, &b, dt);
        vb.y = Some(&yb);
        let (pa, pb) = (va.prefix(r), vb.prefix(r));
        let (y, z) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let diffs = [
            (coeffs.b)(t, rt, &pa) - (coeffs.b)(t, rt, &pb),
            (coeffs.sigma)(t, rt, &pa) - (coeffs.sigma)(t, rt, &pb),
            (coeffs.f)(t, rt, &pa, y, z, Some(0.1)) - (coeffs.f)(t, rt, &pb, y, z, Some(0.1)),
        ];
        for d in diffs {
            worst = worst.max(d.abs());
        }
    }
    ProbeReport {
        name: "adaptedness",
        pass: worst == 0.0,
        worst,
        samples,
    }
}

/// Checks `f(·, y₂, ·) ≥ f(·, y₁, ·)` for sampled `y₂ ≥ y₁` when the set
/// declares `monotone_in_y`. Reports the largest violation.
pub fn probe_monotonicity(coeffs: &CoefficientSet, n_nodes: usize, samples: usize, seed: u64) -> ProbeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / (n_nodes - 1) as f64;
    let mut worst: f64 = 0.0;
    if coeffs.meta.monotone_in_y {
        for _ in 0..samples {
            let x = random_path(&mut rng, n_nodes);
            let r = rng.gen_range(0..n_nodes);
            let t = rng.gen_range(0..=r) as f64 * dt;
            let view = PathView::new(&x[..=r], &x[..=r], dt);
            let y1 = rng.gen_range(-3.0..3.0);
            let y2 = y1 + rng.gen_range(0.0..2.0);
            let z = rng.gen_range(-1.0..1.0);
            let rt = r as f64 * dt;
            let d = (coeffs.f)(t, rt, &view, y1, z, Some(z)) - (coeffs.f)(t, rt, &view, y2, z, Some(z));
            worst = worst.max(d);
        }
    }
    ProbeReport {
        name: "monotonicity",
        pass: worst <= 0.0,
        worst,
        samples,
    }
}

/// Compares the analytic derivative weights with central differences
/// (step `h`) at random points; reports the largest relative error.
pub fn probe_derivatives(
    coeffs: &CoefficientSet,
    n_nodes: usize,
    samples: usize,
    seed: u64,
    h: f64,
) -> Result<ProbeReport> {
    let d = derivative_weights(coeffs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / (n_nodes - 1) as f64;
    let mut worst: f64 = 0.0;
    let rel = |analytic: f64, fd: f64| (analytic - fd).abs() / (1.0 + analytic.abs());
    for _ in 0..samples {
        let x = random_path(&mut rng, n_nodes);
        let r = rng.gen_range(0..n_nodes);
        let t_idx = rng.gen_range(0..=r);
        let (t, rt) = (t_idx as f64 * dt, r as f64 * dt);
        let y = rng.gen_range(-1.0..1.0);
        let z = rng.gen_range(-1.0..1.0);
        let bump = |delta: f64| {
            let mut p = x[..=r].to_vec();
            p[r] += delta;
            p
        };
        let (up, dn) = (bump(h), bump(-h));
        let vu = PathView::new(&up, &up, dt);
        let vd = PathView::new(&dn, &dn, dt);
        let v0 = PathView::new(&x[..=r], &x[..=r], dt);
        let xr = x[r];
        let fd_b = ((coeffs.b)(t, rt, &vu) - (coeffs.b)(t, rt, &vd)) / (2.0 * h);
        worst = worst.max(rel((d.db)(t, rt, xr), fd_b));
        let fd_s = ((coeffs.sigma)(t, rt, &vu) - (coeffs.sigma)(t, rt, &vd)) / (2.0 * h);
        worst = worst.max(rel((d.dsigma)(t, rt, xr), fd_s));
        let f = &coeffs.f;
        let fd_fx = (f(t, rt, &vu, y, z, None) - f(t, rt, &vd, y, z, None)) / (2.0 * h);
        worst = worst.max(rel((d.df_x)(t, rt, xr, y, z), fd_fx));
        let fd_fy = (f(t, rt, &v0, y + h, z, None) - f(t, rt, &v0, y - h, z, None)) / (2.0 * h);
        worst = worst.max(rel((d.df_y)(t, rt, xr, y, z), fd_fy));
        let fd_fz = (f(t, rt, &v0, y, z + h, None) - f(t, rt, &v0, y, z - h, None)) / (2.0 * h);
        worst = worst.max(rel((d.df_z)(t, rt, xr, y, z), fd_fz));

        let full = PathView::new(&x, &x, dt);
        let weights = d.dg_weights(t, &full);
        let k = rng.gen_range(0..n_nodes);
        let mut up = x.clone();
        up[k] += h;
        let mut dn = x.clone();
        dn[k] -= h;
        let fd_g = ((coeffs.g)(t, &PathView::new(&up, &up, dt)) - (coeffs.g)(t, &PathView::new(&dn, &dn, dt)))
            / (2.0 * h);
        worst = worst.max(rel(weights[k], fd_g));
    }
    Ok(ProbeReport {
        name: "derivative-consistency",
        pass: worst <= 1e-4,
        worst,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors_reproduce_shipped_specs() {
        let x = [0.0, 0.4, -0.7];
        let w = [0.0; 3];
        let v = PathView::new(&x, &w, 0.5);
        for (variant, (a, b, xi)) in LINEAR_VARIANTS.iter().zip([
            ("exp-decay", "zero", "one-plus-t"),
            ("const", "zero", "t-square"),
            ("affine-t", "exp-r", "quadratic"),
        ]) {
            let shipped = linear_spec(variant).unwrap();
            let built = linear_from_selectors(a, b, xi).unwrap();
            assert_eq!(built.deterministic, shipped.deterministic);
            for (t, r) in [(0.0, 0.5), (0.25, 1.0)] {
                assert_eq!((built.alpha)(t, r), (shipped.alpha)(t, r));
                assert_eq!((built.beta)(t, r), (shipped.beta)(t, r));
                assert_eq!((built.xi)(t, &v), (shipped.xi)(t, &v));
            }
        }
        assert!(linear_from_selectors("nope", "zero", "one-plus-t").is_err());
        assert!(ALPHA_NAMES.iter().all(|a| linear_from_selectors(a, BETA_NAMES[0], XI_NAMES[0]).is_ok()));
    }

    fn view(x: &[f64]) -> PathView<'_> {
        PathView::new(x, x, 0.25)
    }

    #[test]
    fn bm_coefficients() {
        let c = builtin("bm", &Params::new()).unwrap();
        let x = [0.0, 1.0, 2.0];
        assert_eq!((c.b)(1.0, 0.5, &view(&x)), 0.0);
        assert_eq!((c.sigma)(1.0, 0.5, &view(&x)), 1.0);
        assert_eq!((c.g)(1.0, &view(&x)), 2.0);
    }

    #[test]
    fn fbm_kernel_values() {
        let c = builtin("fbm", &Params::new().with("H", 0.7).with("c", 1.0)).unwrap();
        let x = [0.0];
        let s = (c.sigma)(1.0, 0.5, &view(&x));
        assert!((s - 0.5f64.powf(0.2)).abs() < 1e-15);
        assert_eq!((c.sigma)(0.5, 0.5, &view(&x)), 0.0);
        assert_eq!((c.b)(1.0, 0.5, &view(&x)), 0.0);
    }

    #[test]
    fn fbm_rejects_bad_hurst() {
        let e = builtin("fbm", &Params::new().with("H", 1.5)).unwrap_err();
        assert!(e.to_string().contains("H must lie in (0,1)"));
        assert!(builtin("fbm", &Params::new().with("H", 0.0)).is_err());
    }

    #[test]
    fn unknown_family_and_key() {
        assert!(matches!(builtin("nope", &Params::new()), Err(Error::Unknown { .. })));
        let e = builtin("bm", &Params::new().with("H", 0.3)).unwrap_err();
        assert!(e.to_string().contains("'H'"));
        assert!(builtin("fbm", &Params::new().with("H", "abc")).is_err());
    }

    #[test]
    fn singular_flag() {
        assert!(KernelSpec::Fractional { hurst: 0.3, scale: 1.0 }.is_singular());
        assert!(!KernelSpec::Fractional { hurst: 0.7, scale: 1.0 }.is_singular());
    }

    #[test]
    fn evaluation_functional_weight() {
        let c = bm();
        let d = derivative_weights(&c).unwrap();
        let x = [0.3, 0.1, -0.2, 0.5];
        assert_eq!(d.dg_weights(0.0, &view(&x)), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn integral_functional_weights() {
        let mut w = vec![0.0; 5];
        trapezoid_weights(0.25, &mut w, 1.0);
        assert_eq!(w, vec![0.125, 0.25, 0.25, 0.25, 0.125]);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let direct = trapezoid(&x, 0.25);
        let weighted: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(direct, weighted);
        assert_eq!(direct, 3.0 * 1.0);
    }

    #[test]
    fn linear_sigma_has_unit_derivative() {
        // σ(t, r, x) = x_r
        let c = CoefficientSet::new(
            "lin",
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, v| v.x_now()),
            Arc::new(|_, _, _, _, _, _| 0.0),
            Arc::new(|_, _| 0.0),
        );
        let x = [0.2, 0.7];
        let h = 1e-5;
        let up = [0.2, 0.7 + h];
        let dn = [0.2, 0.7 - h];
        let fd = ((c.sigma)(1.0, 0.25, &view(&up)) - (c.sigma)(1.0, 0.25, &view(&dn))) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-9);
        assert_eq!((c.sigma)(1.0, 0.25, &view(&x)), 0.7);
    }

    #[test]
    fn probes_pass_on_builtins() {
        for name in BUILTIN_NAMES {
            let c = builtin(name, &Params::new()).unwrap();
            let a = probe_adaptedness(&c, 17, 200, 1);
            assert!(a.pass, "{name}: {a:?}");
            let m = probe_monotonicity(&c, 17, 200, 2);
            assert!(m.pass, "{name}: {m:?}");
        }
    }

    #[test]
    fn derivative_probe_on_state_families() {
        for c in [bm(), fbm(0.7, 1.0).unwrap(), state_lipschitz(0.25, 0.1), zero()] {
            let r = probe_derivatives(&c, 17, 300, 3, 1e-5).unwrap();
            assert!(r.pass, "{}: {r:?}", c.name);
        }
    }

    #[test]
    fn derivative_probe_detects_wrong_weights() {
        let mut c = state_lipschitz(0.25, 0.1);
        let d = c.derivatives.as_mut().unwrap();
        d.df_y = Arc::new(|_, _, _, _, _| 0.5);
        let r = probe_derivatives(&c, 17, 50, 3, 1e-5).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn path_dependent_set_has_no_weights() {
        let c = linear_spec("full").unwrap().coefficients();
        assert!(derivative_weights(&c).is_err());
    }

    #[test]
    fn monotonicity_probe_detects_violation() {
        let mut c = state_lipschitz(-0.5, 0.0);
        c.meta.monotone_in_y = true;
        assert!(!probe_monotonicity(&c, 9, 100, 4).pass);
    }

    #[test]
    fn shifts() {
        let c = state_lipschitz(0.25, 0.1);
        let s = c.clone().shift_driver(0.5).shift_terminal(1.0);
        let x = [0.1, 0.2, 0.3];
        let v = view(&x);
        assert_eq!((s.f)(0.0, 0.5, &v, 0.1, 0.2, None), (c.f)(0.0, 0.5, &v, 0.1, 0.2, None) + 0.5);
        assert_eq!((s.g)(0.0, &v), (c.g)(0.0, &v) + 1.0);
    }
}
