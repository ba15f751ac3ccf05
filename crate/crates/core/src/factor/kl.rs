use ndarray::{ArrayView1, ArrayView2, Zip};

use crate::error::{Error, Result};

/// Reconstructions are floored at this value inside the divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// Generalized KL divergence of one row, `sum x log(x/z) - x + z`, with
/// `0 log 0 = 0` and `z` floored at [`KL_FLOOR`].
pub fn kl_row(x: ArrayView1<f64>, z: ArrayView1<f64>) -> f64 {
    Zip::from(&x).and(&z).fold(0.0, |acc, &xi, &zi| {
        let zf = zi.max(KL_FLOOR);
        let term = if xi > 0.0 { xi * (xi / zf).ln() - xi + zf } else { zf };
        acc + term
    })
}

/// Gradient of [`kl_row`] in `z`: `1 - x/z`, zero where the floor is active.
pub fn kl_grad_row(x: ArrayView1<f64>, z: ArrayView1<f64>) -> ndarray::Array1<f64> {
    Zip::from(&x)
        .and(&z)
        .map_collect(|&xi, &zi| if zi >= KL_FLOOR { 1.0 - xi / zi } else { 0.0 })
}

/// Generalized KL divergence between a nonnegative `x` and a reconstruction
/// `z`, summed row by row.
pub fn kl_div(x: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != z.dim() {
        return Err(Error::invalid(format!("shapes differ: {:?} vs {:?}", x.dim(), z.dim())));
    }
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("KL needs nonnegative data, found {v}")));
    }
    Ok(x.rows()
        .into_iter()
        .zip(z.rows())
        .map(|(xr, zr)| kl_row(xr, zr))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn examples() {
        let x = array![[1.0, 2.0], [0.5, 3.0]];
        assert_eq!(kl_div(x.view(), x.view()).unwrap(), 0.0);
        assert_eq!(kl_div(array![[0.0]].view(), array![[3.0]].view()).unwrap(), 3.0);
        let v = kl_div(array![[2.0]].view(), array![[1.0]].view()).unwrap();
        assert!((v - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((v - 0.386294).abs() < 1e-6);
    }

    #[test]
    fn negative_data_is_rejected() {
        assert!(matches!(kl_div(array![[-1.0]].view(), array![[1.0]].view()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_reconstruction_is_floored() {
        let v = kl_div(array![[1.0]].view(), array![[0.0]].view()).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }
}
