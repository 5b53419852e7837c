use nalgebra::Matrix3;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::rng::Rng;

/// Draw from a 3x3 Wishart with `df` degrees of freedom and scale `L L'`
/// (Bartlett decomposition). `l` is the lower Cholesky factor of the scale.
pub fn wishart3(df: f64, l: &Matrix3<f64>, rng: &mut Rng) -> Matrix3<f64> {
    let mut a = Matrix3::zeros();
    for i in 0..3 {
        let chi = ChiSquared::new(df - i as f64).expect("df >= dimension");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    la * la.transpose()
}
