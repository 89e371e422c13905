//! Direct tridiagonal solvers used by the implicit diffusion sweeps.
//!
//! Both solvers run in O(n) and overwrite the right-hand side with the
//! solution. The periodic variant handles the torus direction via the
//! Sherman-Morrison rank-one correction.

/// Solve `A x = rhs` for a tridiagonal `A` given by its three diagonals.
///
/// `lower[i]` multiplies `x[i-1]` in row `i` (`lower[0]` unused), `upper[i]`
/// multiplies `x[i+1]` (`upper[n-1]` unused). Requires a nonsingular system;
/// the diffusion matrices here are strictly diagonally dominant.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = rhs.len();
    debug_assert!(n >= 1);
    debug_assert_eq!(lower.len(), n);
    debug_assert_eq!(diag.len(), n);
    debug_assert_eq!(upper.len(), n);

    // Thomas algorithm with scratch for the modified upper diagonal.
    let mut c_star = vec![0.0; n];
    let mut denom = diag[0];
    c_star[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c_star[i - 1];
        c_star[i] = upper[i] / denom;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c_star[i] * rhs[i + 1];
    }
}

/// Solve the cyclic tridiagonal system where row `0` also couples to `x[n-1]`
/// with coefficient `corner_lower`, and row `n-1` to `x[0]` with
/// `corner_upper`.
pub fn solve_cyclic_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    corner_lower: f64,
    corner_upper: f64,
    rhs: &mut [f64],
) {
    let n = rhs.len();
    assert!(n >= 3, "cyclic solve needs at least 3 unknowns");

    // Sherman-Morrison: A = B + u v^T with u = (gamma, 0, .., alpha*beta/gamma)
    // style correction; we use the standard formulation from Numerical Recipes.
    let alpha = corner_upper; // row n-1, column 0
    let beta = corner_lower; // row 0, column n-1
    let gamma = -diag[0];

    let mut diag_mod = diag.to_vec();
    diag_mod[0] = diag[0] - gamma;
    diag_mod[n - 1] = diag[n - 1] - alpha * beta / gamma;

    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;

    solve_tridiagonal(lower, &diag_mod, upper, rhs);
    solve_tridiagonal(lower, &diag_mod, upper, &mut u);

    // v = (1, 0, ..., beta/gamma)
    let fact = (rhs[0] + beta * rhs[n - 1] / gamma) / (1.0 + u[0] + beta * u[n - 1] / gamma);
    for i in 0..n {
        rhs[i] -= fact * u[i];
    }
}

/// Three diagonals of an implicit-step matrix.
pub(crate) struct TridiagFactors {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Factors of (I - nu L) with zero-flux (mirror ghost) boundaries; `nu` is
/// the dimensionless dt * coeff / h^2.
pub(crate) fn diffusion_factors_neumann(n: usize, nu: f64) -> TridiagFactors {
    let mut lower = vec![-nu; n];
    let mut upper = vec![-nu; n];
    let mut diag = vec![1.0 + 2.0 * nu; n];
    lower[0] = 0.0;
    upper[n - 1] = 0.0;
    diag[0] = 1.0 + nu;
    diag[n - 1] = 1.0 + nu;
    TridiagFactors { lower, diag, upper }
}

/// Factors of (I - nu L) with periodic wrap (the corner entries go to the
/// cyclic solver separately).
pub(crate) fn diffusion_factors_periodic(n: usize, nu: f64) -> TridiagFactors {
    let mut lower = vec![-nu; n];
    let mut upper = vec![-nu; n];
    let diag = vec![1.0 + 2.0 * nu; n];
    lower[0] = 0.0;
    upper[n - 1] = 0.0;
    TridiagFactors { lower, diag, upper }
}

/// Slope limiter: zero across sign changes, else the smaller magnitude.
pub(crate) fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() <= b.abs() {
        a
    } else {
        b
    }
}
