//! Numerical oracles for the nsum test suites.
//!
//! Everything here is computed by brute force (quadrature, finite differences,
//! enumeration) and deliberately shares no code with `nsum-core`, so a test that
//! compares the two is comparing independent routes to the same number.

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (7-point rule).
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = KRONROD_WEIGHTS[7] * fc;
    let mut gauss = GAUSS_WEIGHTS[3] * fc;
    for j in 0..7 {
        let x = h * GK_NODES[j];
        let pair = f(c - x) + f(c + x);
        kronrod += KRONROD_WEIGHTS[j] * pair;
        if j % 2 == 1 {
            gauss += GAUSS_WEIGHTS[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) integration of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    let mut stack = vec![(a, b, 0usize)];
    let (whole, _) = gk15(&f, a, b);
    let mut total = 0.0;
    let mut compensation = 0.0;
    while let Some((lo, hi, depth)) = stack.pop() {
        let (value, err) = gk15(&f, lo, hi);
        if err <= rel_tol * whole.abs().max(f64::MIN_POSITIVE) || depth > 60 {
            // Kahan summation keeps the panel total at full precision.
            let y = value - compensation;
            let t = total + y;
            compensation = (t - total) - y;
            total = t;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
    }
    total
}

/// `ln ∫_0^∞ λ^(a-1) exp(-b λ) dλ` by quadrature in `s = ln λ`.
pub fn ln_gamma_integral(a: f64, b: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0);
    let peak = (a / b).ln();
    let g = |s: f64| a * s - b * s.exp();
    let g_peak = g(peak);
    // Exponential left tail for small a, Gaussian (sd 1/√a) core for large a.
    let lo = peak - (45.0 / a).max(12.0 / a.sqrt());
    let hi = ((a + 80.0) / b).ln() + 2.0;
    let f = |s: f64| (g(s) - g_peak).exp();
    let left = integrate(f, lo, peak, 1e-14);
    let right = integrate(f, peak, hi.max(peak + 1.0), 1e-14);
    g_peak + (left + right).ln()
}

/// Log of the Poisson–Gamma mixture mass at `y`, with `λ ~ Gamma(shape w, rate w/μ)`,
/// evaluated entirely by quadrature (including the Gamma normalising constant).
pub fn poisson_gamma_ln_pmf(y: u64, mu: f64, w: f64) -> f64 {
    let rate = w / mu;
    let ln_y_factorial: f64 = (1..=y).map(|j| (j as f64).ln()).sum();
    w * rate.ln() - ln_gamma_integral(w, 1.0) - ln_y_factorial
        + ln_gamma_integral(y as f64 + w, 1.0 + rate)
}

/// Central finite-difference gradient with step `h`.
pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + h;
            let up = f(&probe);
            probe[j] = orig - h;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Plain two-pass mean and (n - 1) variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
