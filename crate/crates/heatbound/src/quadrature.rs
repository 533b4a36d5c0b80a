//! Quadrature rules on the reference simplices.
//!
//! Interval rules are Gauss–Legendre on the unit interval. Triangle rules combine two
//! Gauss–Legendre rules through the collapsed-coordinate (Duffy) map
//! `(ξ,η) ↦ (ξ(1−η), η)` with Jacobian `1−η`, which integrates every
//! polynomial up to the declared degree exactly without tabulated points.
//!
//! Points are stored in barycentric coordinates; weights are positive and sum
//! to the reference-simplex measure (1 for the interval, 1/2 for the
//! triangle).

/// A quadrature rule on the reference interval or triangle.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// Spatial dimension of the simplex (1 or 2).
    pub dim: usize,
    /// Barycentric coordinates of each point (d+1 entries used).
    pub points: Vec<[f64; 3]>,
    /// Positive weights summing to the reference-simplex measure.
    pub weights: Vec<f64>,
    /// All polynomials of total degree up to this are integrated exactly.
    pub exactness_degree: usize,
}

impl QuadratureRule {
    /// Gauss–Legendre rule on the reference interval \[0,1\], exact for
    /// polynomials of degree ≤ `degree`.
    pub fn interval(degree: usize) -> Self {
        let m = degree / 2 + 1;
        let (x, w) = gauss_legendre_unit(m);
        QuadratureRule {
            dim: 1,
            points: x.iter().map(|&s| [1.0 - s, s, 0.0]).collect(),
            weights: w,
            exactness_degree: 2 * m - 1,
        }
    }

    /// Collapsed-coordinate rule on the reference triangle
    /// {(x,y): x,y ≥ 0, x+y ≤ 1}, exact for total degree ≤ `degree`.
    pub fn triangle(degree: usize) -> Self {
        // ξ carries degree `degree`, η carries `degree + 1` (Jacobian).
        let m = degree / 2 + 1;
        let m_eta = (degree + 1) / 2 + 1;
        let (xi, wxi) = gauss_legendre_unit(m);
        let (eta, weta) = gauss_legendre_unit(m_eta);
        let mut points = Vec::with_capacity(m * m_eta);
        let mut weights = Vec::with_capacity(m * m_eta);
        for (j, &e) in eta.iter().enumerate() {
            for (i, &s) in xi.iter().enumerate() {
                let x = s * (1.0 - e);
                let y = e;
                points.push([1.0 - x - y, x, y]);
                weights.push(wxi[i] * weta[j] * (1.0 - e));
            }
        }
        QuadratureRule {
            dim: 2,
            points,
            weights,
            exactness_degree: degree,
        }
    }

    /// Rule for the given simplex dimension.
    pub fn simplex(dim: usize, degree: usize) -> Self {
        match dim {
            1 => Self::interval(degree),
            2 => Self::triangle(degree),
            _ => panic!("unsupported dimension {dim}"),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gauss–Legendre nodes and weights on \[0,1\].
///
/// Nodes are found by Newton iteration on the Legendre recurrence; for the
/// small point counts used here the iteration converges to machine precision
/// in a handful of steps.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Initial guess on [-1,1].
        let mut x = (std::f64::consts::PI * (4.0 * i as f64 + 3.0) / (4.0 * n as f64 + 2.0)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Map [-1,1] -> [0,1].
        nodes[i] = 0.5 * (x + 1.0);
        weights[i] = 0.5 * w;
    }
    // Ascending node order, independent of the seeding order above.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].total_cmp(&nodes[b]));
    let nodes_sorted = idx.iter().map(|&i| nodes[i]).collect();
    let weights_sorted = idx.iter().map(|&i| weights[i]).collect();
    (nodes_sorted, weights_sorted)
}

/// Gauss points and weights on an arbitrary interval \[a,b\].
pub fn gauss_on_interval(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre_unit(n);
    x.iter()
        .zip(&w)
        .map(|(&s, &wi)| (a + s * (b - a), wi * (b - a)))
        .collect()
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
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Shifted Legendre polynomial P̃_j on \[0,1\] (orthogonal, P̃_j(1) = 1).
pub fn shifted_legendre(j: usize, s: f64) -> f64 {
    let x = 2.0 * s - 1.0;
    match j {
        0 => 1.0,
        1 => x,
        _ => {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=j {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monomial_integral_interval(a: usize) -> f64 {
        1.0 / (a as f64 + 1.0)
    }

    /// ∫_T x^a y^b over the reference triangle = a! b! / (a+b+2)!.
    fn monomial_integral_triangle(a: usize, b: usize) -> f64 {
        let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>().max(1.0);
        fact(a) * fact(b) / fact(a + b + 2)
    }

    #[test]
    fn interval_rules_are_exact() {
        for degree in [1, 2, 4, 6, 9, 15] {
            let rule = QuadratureRule::interval(degree);
            assert!(rule.exactness_degree >= degree);
            for a in 0..=rule.exactness_degree {
                let sum: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(p, w)| w * p[1].powi(a as i32))
                    .sum();
                let exact = monomial_integral_interval(a);
                assert!(
                    (sum - exact).abs() <= 1e-13 * exact.abs().max(1.0),
                    "deg {degree}, x^{a}: {sum} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn triangle_rules_are_exact() {
        for degree in [2, 4, 6, 10, 14] {
            let rule = QuadratureRule::triangle(degree);
            for a in 0..=degree {
                for b in 0..=(degree - a) {
                    let sum: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, w)| w * p[1].powi(a as i32) * p[2].powi(b as i32))
                        .sum();
                    let exact = monomial_integral_triangle(a, b);
                    assert!(
                        (sum - exact).abs() <= 1e-13 * exact.abs().max(1.0),
                        "deg {degree}, x^{a} y^{b}: {sum} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn weights_positive_and_sum_to_reference_measure() {
        let r1 = QuadratureRule::interval(6);
        assert!(r1.weights.iter().all(|&w| w > 0.0));
        assert!((r1.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);

        let r2 = QuadratureRule::triangle(6);
        assert!(r2.weights.iter().all(|&w| w > 0.0));
        assert!((r2.weights.iter().sum::<f64>() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn barycentric_points_lie_inside() {
        let r2 = QuadratureRule::triangle(8);
        for p in &r2.points {
            assert!(p.iter().all(|&l| l > 0.0 && l < 1.0));
            assert!((p[0] + p[1] + p[2] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gauss_interval_mapping() {
        // ∫_1^3 t^3 dt = 20
        let pts = gauss_on_interval(1.0, 3.0, 3);
        let sum: f64 = pts.iter().map(|&(t, w)| w * t * t * t).sum();
        assert!((sum - 20.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_legendre_orthogonality() {
        let rule = QuadratureRule::interval(12);
        for i in 0..=4usize {
            for j in 0..=4usize {
                let sum: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(p, w)| w * shifted_legendre(i, p[1]) * shifted_legendre(j, p[1]))
                    .sum();
                let exact = if i == j {
                    1.0 / (2.0 * i as f64 + 1.0)
                } else {
                    0.0
                };
                assert!((sum - exact).abs() < 1e-14, "({i},{j}): {sum}");
            }
        }
    }
}
