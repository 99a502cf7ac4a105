//! Eager (untaped) versions of the differentiable operations, for
//! inference paths that do not need gradients. They share kernels with
//! [`super::Graph`] and return identical values.

use crate::error::Result;
use crate::numerics::graph::{check_pool, check_upsample};
use crate::numerics::kernels::{self, ConvGeometry};
use crate::numerics::{Scalar, Tensor};

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let (out, _) = kernels::conv2d_forward(input.data(), kernel.data(), bias.data(), &g);
    Tensor::from_vec(&[g.out_channels, g.out_h, g.out_w], out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(x.shape(), kernels::relu_forward(x.data())).expect("same shape")
}

pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let dims = x.dims3()?;
    check_pool(dims, k, stride)?;
    let (out, _) = kernels::maxpool_forward(x.data(), dims, k, stride);
    Tensor::from_vec(
        &[
            dims.0,
            kernels::pool_output_extent(dims.1, k, stride),
            kernels::pool_output_extent(dims.2, k, stride),
        ],
        out,
    )
}

pub fn bilinear_upsample<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let dims = x.dims3()?;
    check_upsample(dims, out_h, out_w)?;
    let rows = kernels::align_corners_taps(dims.1, out_h);
    let cols = kernels::align_corners_taps(dims.2, out_w);
    Tensor::from_vec(
        &[dims.0, out_h, out_w],
        kernels::bilinear_forward(x.data(), dims, &rows, &cols),
    )
}

pub fn l2_normalize_channels<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let dims = x.dims3()?;
    let (out, _) = kernels::l2_normalize_forward(x.data(), dims, eps);
    Tensor::from_vec(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 3], &[1.0, -2.0, 3.0, 4.5, 0.0, 6.0]).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &k, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::<f64>::zeros(&[2, 5, 5]);
        let k = Tensor::full(&[3, 2, 3, 3], 0.7);
        let b = Tensor::from_f64(&[3], &[0.25, -1.0, 2.0]).unwrap();
        let out = conv2d(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(out.shape(), &[3, 3, 3]);
        for c in 0..3 {
            for v in &out.data()[c * 9..(c + 1) * 9] {
                assert_eq!(*v, b.data()[c]);
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
        let k = Tensor::zeros(&[1, 2, 7, 7]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let k = Tensor::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x: Vec<f64> = (0..2 * 5 * 4)
            .map(|i| ((i * 7) % 11) as f64 - 5.0)
            .collect();
        let kv: Vec<f64> = (0..3 * 2 * 9)
            .map(|i| ((i * 5) % 7) as f64 * 0.25 - 0.5)
            .collect();
        let xt = Tensor::from_vec(&[2, 5, 4], x.clone()).unwrap();
        let kt = Tensor::from_vec(&[3, 2, 3, 3], kv.clone()).unwrap();
        let bt = Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap();
        let (stride, pad) = (2, 1);
        let out = conv2d(&xt, &kt, &bt, stride, pad).unwrap();
        let (ho, wo) = ((5 + 2 - 3) / 2 + 1, (4 + 2 - 3) / 2 + 1);
        assert_eq!(out.shape(), &[3, ho, wo]);
        for co in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bt.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    s += x[(ci * 5 + iy as usize) * 4 + ix as usize]
                                        * kv[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((out.at3(co, oy, ox) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::<f64>::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(&[2, 4, 6], 0.3);
        let out = maxpool2d(&c, 2, 2).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.3));
        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn upsample_cases() {
        let one = Tensor::<f64>::full(&[1, 1, 1], 0.42);
        let up = bilinear_upsample(&one, 5, 7).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.42));

        let row = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.0, 1.0]).unwrap();
        assert_eq!(
            bilinear_upsample(&row, 1, 3).unwrap().data(),
            &[0.0, 0.5, 1.0]
        );

        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(bilinear_upsample(&x, 2, 8).is_err());
    }

    #[test]
    fn normalize_cases() {
        let x = Tensor::<f64>::from_f64(&[2, 1, 1], &[3.0, 4.0]).unwrap();
        let y = l2_normalize_channels(&x, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);

        let u = Tensor::<f64>::from_f64(&[2, 1, 1], &[0.6, 0.8]).unwrap();
        let v = l2_normalize_channels(&u, 1e-12).unwrap();
        for (a, b) in u.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let z = Tensor::<f64>::zeros(&[3, 2, 2]);
        assert!(l2_normalize_channels(&z, 1e-12)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}
