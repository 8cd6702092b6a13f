use statrs::statistics::Statistics;

pub fn mean(xs: &[f64]) -> f64 {
    xs.mean()
}

/// Sample standard deviation over `√n`; zero for fewer than two values.
pub fn std_of_mean(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.std_dev() / (xs.len() as f64).sqrt()
}
