//! Small numeric helpers shared by the estimator and audit modules.

/// SplitMix64 finalizer; maps structured seed material to a stream seed.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream seed for `(master, m, replication)`.
pub fn stream_seed(master: u64, m: u64, replication: u64) -> u64 {
    mix64(mix64(mix64(master) ^ m) ^ replication)
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// OLS slope of `ln y` on `ln x`, skipping rows with `y <= floor`. `None`
/// when fewer than two rows survive.
pub fn loglog_slope(xs: &[f64], ys: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > floor)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `ln k!` for `k = 0..=n`.
pub fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Binomial pmf over `0..=m`, computed in log space.
pub fn binomial_pmf(m: u64, p: f64) -> Vec<f64> {
    let size = m as usize + 1;
    if p <= 0.0 {
        let mut v = vec![0.0; size];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; size];
        v[m as usize] = 1.0;
        return v;
    }
    let lf = ln_factorials(m);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    (0..=m)
        .map(|k| {
            let kk = k as usize;
            (lf[m as usize] - lf[kk] - lf[(m - k) as usize] + k as f64 * lp + (m - k) as f64 * lq).exp()
        })
        .collect()
}
