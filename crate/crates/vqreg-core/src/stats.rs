//! Small statistics helpers: mean/std aggregation and the paired t-test.

/// Mean and population standard deviation.
pub fn mean_std_pop(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct PairedTTest {
    pub t: f64,
    pub dof: usize,
    /// Two-sided p-value.
    pub p: f64,
}

/// Paired two-sided t-test on matched observations.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<PairedTTest> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let dof = a.len() - 1;
    if var == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        return Some(PairedTTest { t: if mean == 0.0 { 0.0 } else { f64::INFINITY }, dof, p });
    }
    let t = mean / (var / n).sqrt();
    let x = dof as f64 / (dof as f64 + t * t);
    let p = incomplete_beta_reg(0.5 * dof as f64, 0.5, x);
    Some(PairedTTest { t, dof, p })
}

/// Regularized incomplete beta function I_x(a, b) via the Lentz continued
/// fraction expansion.
pub fn incomplete_beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;
        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln(Gamma(x)).
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for g in G {
        y += 1.0;
        ser += g / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_constant_sequence() {
        let (m, s) = mean_std_pop(&[2.0, 2.0, 2.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn mean_std_known_values() {
        // population std of 1..=5 is sqrt(2)
        let (m, s) = mean_std_pop(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((m - 3.0).abs() < 1e-15);
        assert!((s - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn incomplete_beta_reference_values() {
        // I_0.5(1, 1) = 0.5 (uniform cdf)
        assert!((incomplete_beta_reg(1.0, 1.0, 0.5) - 0.5).abs() < 1e-12);
        // I_x(1, 1) = x
        assert!((incomplete_beta_reg(1.0, 1.0, 0.25) - 0.25).abs() < 1e-12);
        // symmetric case: I_0.5(2, 2) = 0.5
        assert!((incomplete_beta_reg(2.0, 2.0, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn paired_t_test_detects_shift() {
        let a = [1.1, 1.3, 0.9, 1.2, 1.0, 1.1, 1.25, 0.95];
        let b: Vec<f64> = a.iter().map(|v| v - 1.0).collect();
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.p < 1e-6, "p = {}", r.p);

        // identical pairs -> p = 1
        let r2 = paired_t_test(&a, &a.to_vec()).unwrap();
        assert_eq!(r2.p, 1.0);
    }

    #[test]
    fn paired_t_test_symmetric_near_one_for_noise() {
        // t with dof=9, |t| small -> p close to 1
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let b = [1.1, 1.9, 3.1, 3.9, 5.1, 4.9, 7.1, 7.9, 9.1, 9.9];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.p > 0.3);
    }
}
