use crate::error::{contract, Result};

use super::{kernels, Scalar, Tensor};

/// Normalized `size x size` Gaussian kernel centred on the middle cell.
pub fn gaussian_kernel<T: Scalar>(size: usize, sigma: T) -> Result<Tensor<T>> {
    if size % 2 == 0 {
        return contract(format!("kernel size must be odd, got {size}"));
    }
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return contract(format!("kernel sigma must be positive, got {sigma}"));
    }
    let r = (size / 2) as isize;
    let two_s2 = T::from_f64_lossy(2.0) * sigma * sigma;
    let mut data = Vec::with_capacity(size * size);
    for i in -r..=r {
        for j in -r..=r {
            let d2 = T::from_isize(i * i + j * j).unwrap_or_else(T::zero);
            data.push((-d2 / two_s2).exp());
        }
    }
    let total: T = data.iter().copied().sum();
    for v in &mut data {
        *v /= total;
    }
    Tensor::new(&[size, size], data)
}

/// Channel-wise 2-D convolution of `map` (`[H, W]` or `[C, H, W]`) with a
/// square kernel, zero padding, same-shaped output.
pub fn smooth<T: Scalar>(map: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let ks = kernel.shape();
    if ks.len() != 2 || ks[0] != ks[1] {
        return contract(format!("smoothing kernel must be square, got {ks:?}"));
    }
    let (c, h, w) = match *map.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return contract(format!("smooth expects [H, W] or [C, H, W], got {s:?}")),
    };
    let k = ks[0];
    if k > h || k > w {
        return contract(format!("kernel {k}x{k} larger than map {h}x{w}"));
    }
    if k == 1 {
        return Ok(map.scale(kernel.item()));
    }
    let x = map.reshape(&[c, 1, h, w])?;
    let kw = kernel.reshape(&[1, 1, k, k])?;
    kernels::conv2d(&x, &kw)?.reshape(map.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel() {
        let k = gaussian_kernel(1, 0.7f64).unwrap();
        assert_eq!(k.data(), [1.0]);
    }

    #[test]
    fn wide_sigma_is_uniform() {
        let k = gaussian_kernel(3, 1e6f64).unwrap();
        for v in k.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-6);
        }
    }

    #[test]
    fn centre_value_by_direct_summation() {
        let mut z = 0.0;
        for i in -2i32..=2 {
            for j in -2i32..=2 {
                z += (-f64::from(i * i + j * j) / 2.0).exp();
            }
        }
        let k = gaussian_kernel(5, 1.0).unwrap();
        assert!((k.data()[12] - 1.0 / z).abs() < 1e-15);
        assert!((k.sum() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn even_size_rejected() {
        assert!(gaussian_kernel::<f64>(4, 1.0).is_err());
    }

    #[test]
    fn impulse_stamps_kernel() {
        let k = gaussian_kernel(3, 0.8).unwrap();
        let mut m = Tensor::<f64>::zeros(&[5, 6]);
        m.data_mut()[2 * 6 + 3] = 1.0;
        let s = smooth(&m, &k).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                let got = s.data()[(1 + dy) * 6 + (2 + dx)];
                assert!((got - k.data()[dy * 3 + dx]).abs() < 1e-15);
            }
        }
        assert!((s.sum() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identity_kernel() {
        let k = gaussian_kernel(1, 1.0).unwrap();
        let m = Tensor::new(&[2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        assert_eq!(smooth(&m, &k).unwrap(), m);
    }

    #[test]
    fn kernel_larger_than_map() {
        let k = gaussian_kernel(5, 1.0).unwrap();
        assert!(smooth(&Tensor::<f64>::zeros(&[3, 3]), &k).is_err());
    }
}
