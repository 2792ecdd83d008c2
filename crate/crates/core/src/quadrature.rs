//! Gauss–Legendre rules and the numeric settings used to integrate tilted
//! densities.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Settings for the tilted-moment integrals.
///
/// Continuous families use a composite Gauss–Legendre rule laid out in
/// standardized units `u = (y - mean) / sd` on `[-half_width, half_width]`.
/// Discrete families sum the support directly.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureConfig {
    /// Number of equal-width panels of the base layout.
    pub panels: usize,
    /// Gauss–Legendre order within each panel.
    pub nodes_per_panel: usize,
    /// Half width of the base range in standard deviations.
    pub half_width_sd: f64,
    /// Convergence threshold on the change of the log normalizer under doubling.
    pub rel_tol: f64,
    /// Maximum number of range/node doublings before giving up.
    pub max_doublings: usize,
    /// Discrete sums stop once a term is below this fraction of the running sum.
    pub tail_rel: f64,
    /// ... and the support point is beyond `m + tail_sd * sqrt(m)`.
    pub tail_sd: f64,
    /// Discrete sums always include at least this many support points.
    pub min_terms: usize,
    /// Hard limit on discrete support points.
    pub max_terms: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            panels: 11,
            nodes_per_panel: 11,
            half_width_sd: 9.0,
            rel_tol: 1e-8,
            max_doublings: 6,
            tail_rel: 1e-12,
            tail_sd: 12.0,
            min_terms: 50,
            max_terms: 200_000,
        }
    }
}

impl QuadratureConfig {
    pub fn base_nodes(&self) -> usize {
        self.panels * self.nodes_per_panel
    }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss–Legendre order must be positive");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

type Rule = (Vec<f64>, Vec<f64>);

/// Cached rule of order `n`; each order is computed once per process.
pub(crate) fn gl_rule(n: usize) -> &'static Rule {
    static RULES: OnceLock<Mutex<HashMap<usize, &'static Rule>>> = OnceLock::new();
    let cache = RULES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(n)
        .or_insert_with(|| Box::leak(Box::new(gauss_legendre(n))))
}

/// Integrates `f` over `[a, b]` with one `n`-point Gauss–Legendre panel.
pub fn integrate_panel(a: f64, b: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let (x, w) = gl_rule(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    x.iter()
        .zip(w)
        .map(|(&xi, &wi)| wi * f(mid + half * xi))
        .sum::<f64>()
        * half
}
