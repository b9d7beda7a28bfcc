//! Brute-force integer reference for convolution and fully-connected layers.
//!
//! Cross-correlation (no kernel flip), 64-bit accumulation, zero padding.
//! [`quantized_ref`] applies the same arithmetic to reconstructed PSI weights
//! and is the target the array simulator must match bit for bit.

use crate::error::{Result, TmaError};
use crate::network::ConvGeometry;
use crate::psiquant::{reconstruct, PsiWeight};
use crate::tensor::Tensor;

fn to_i32(v: i64) -> Result<i32> {
    i32::try_from(v).map_err(|_| TmaError::Width {
        what: "reference output",
        value: v,
        bits: 32,
    })
}

/// `input` is `[C, H, W]`, `weights` `[K, C, kh, kw]`; returns `[K, H_out, W_out]`.
pub fn conv2d_ref(
    input: &Tensor<u8>,
    weights: &Tensor<i32>,
    bias: &[i32],
    geometry: &ConvGeometry,
) -> Result<Tensor<i32>> {
    let [c, h, w] = dims3(input.dims(), "input")?;
    let wd = weights.dims();
    if wd.len() != 4 || wd[1] != c || wd[2] != geometry.kernel_h || wd[3] != geometry.kernel_w {
        return Err(TmaError::Shape(format!(
            "weights {wd:?} do not match input channels {c} and kernel {}x{}",
            geometry.kernel_h, geometry.kernel_w
        )));
    }
    let k = wd[0];
    if bias.len() != k {
        return Err(TmaError::Shape(format!("{} biases for {k} filters", bias.len())));
    }
    let (kh, kw) = (geometry.kernel_h, geometry.kernel_w);
    if h + 2 * geometry.padding < kh || w + 2 * geometry.padding < kw {
        return Err(TmaError::Shape("kernel larger than padded input".into()));
    }
    let (oh, ow) = (geometry.out_h(h), geometry.out_w(w));
    let pad = geometry.padding as isize;
    let x = input.data();
    let wt = weights.data();
    let mut out = Vec::with_capacity(k * oh * ow);
    for f in 0..k {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[f] as i64;
                for ch in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * geometry.stride_v + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * geometry.stride_h + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(ch * h + iy as usize) * w + ix as usize] as i64;
                            let wv = wt[((f * c + ch) * kh + ky) * kw + kx] as i64;
                            acc += xv * wv;
                        }
                    }
                }
                out.push(to_i32(acc)?);
            }
        }
    }
    Tensor::from_vec(&[k, oh, ow], out)
}

/// [`conv2d_ref`] with every weight replaced by its PSI reconstruction.
pub fn quantized_ref(
    input: &Tensor<u8>,
    psi_weights: &Tensor<PsiWeight>,
    bias: &[i32],
    geometry: &ConvGeometry,
) -> Result<Tensor<i32>> {
    conv2d_ref(input, &psi_weights.map(reconstruct), bias, geometry)
}

/// `weights` is `[outputs, inputs]`.
pub fn fc_ref(input: &[u8], weights: &Tensor<i32>, bias: &[i32]) -> Result<Vec<i32>> {
    let wd = weights.dims();
    if wd.len() != 2 || wd[1] != input.len() {
        return Err(TmaError::Shape(format!(
            "weights {wd:?} do not match input length {}",
            input.len()
        )));
    }
    if bias.len() != wd[0] {
        return Err(TmaError::Shape(format!("{} biases for {} outputs", bias.len(), wd[0])));
    }
    weights
        .data()
        .chunks_exact(wd[1])
        .zip(bias)
        .map(|(row, &b)| {
            let dot: i64 = row.iter().zip(input).map(|(&w, &x)| w as i64 * x as i64).sum();
            to_i32(dot + b as i64)
        })
        .collect()
}

pub fn fc_quantized_ref(
    input: &[u8],
    psi_weights: &Tensor<PsiWeight>,
    bias: &[i32],
) -> Result<Vec<i32>> {
    fc_ref(input, &psi_weights.map(reconstruct), bias)
}

fn dims3(d: &[usize], what: &str) -> Result<[usize; 3]> {
    match d {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(TmaError::Shape(format!("{what} must be [C, H, W], got {d:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psiquant::{decompose_tensor, PrecisionMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scatter-style convolution: walks input pixels and pushes their
    /// contribution into every output they touch.
    fn scatter_conv(
        x: &Tensor<u8>,
        w: &Tensor<i32>,
        bias: &[i32],
        g: &ConvGeometry,
    ) -> Vec<i64> {
        let (c, h, wi) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let k = w.dims()[0];
        let (oh, ow) = (g.out_h(h), g.out_w(wi));
        let mut out = vec![0i64; k * oh * ow];
        for f in 0..k {
            for i in 0..oh * ow {
                out[f * oh * ow + i] = bias[f] as i64;
            }
        }
        for ch in 0..c {
            for iy in 0..h {
                for ix in 0..wi {
                    let xv = *x.get(&[ch, iy, ix]) as i64;
                    for f in 0..k {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let py = iy + g.padding;
                                let px = ix + g.padding;
                                if py < ky || px < kx {
                                    continue;
                                }
                                let (sy, sx) = (py - ky, px - kx);
                                if sy % g.stride_v != 0 || sx % g.stride_h != 0 {
                                    continue;
                                }
                                let (oy, ox) = (sy / g.stride_v, sx / g.stride_h);
                                if oy < oh && ox < ow {
                                    out[(f * oh + oy) * ow + ox] +=
                                        xv * *w.get(&[f, ch, ky, kx]) as i64;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Tensor<u8>, Tensor<i32>, Vec<i32>, ConvGeometry) {
        let c = rng.gen_range(1..5);
        let k = rng.gen_range(1..4);
        let kh = rng.gen_range(1..6);
        let kw = rng.gen_range(1..6);
        let h = rng.gen_range(kh..12);
        let w = rng.gen_range(kw..12);
        let g = ConvGeometry {
            kernel_h: kh,
            kernel_w: kw,
            stride_v: rng.gen_range(1..4),
            stride_h: rng.gen_range(1..4),
            padding: rng.gen_range(0..3),
        };
        let x = Tensor::from_fn(&[c, h, w], |_| rng.gen()).unwrap();
        let wt = Tensor::from_fn(&[k, c, kh, kw], |_| rng.gen_range(-128..128)).unwrap();
        let b = (0..k).map(|_| rng.gen_range(-1000..1000)).collect();
        (x, wt, b, g)
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::from_fn(&[1, 4, 5], |i| i as u8 * 3).unwrap();
        let mut w = Tensor::<i32>::zeros(&[1, 1, 3, 3]).unwrap();
        w.set(&[0, 0, 1, 1], 1);
        let y = conv2d_ref(&x, &w, &[0], &ConvGeometry::square(3, 1, 1)).unwrap();
        assert_eq!(y.data(), x.map(|&v| v as i32).data());
    }

    #[test]
    fn ones_kernel_on_ones() {
        let x = Tensor::from_vec(&[1, 3, 3], vec![1u8; 9]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1; 9]).unwrap();
        let y = conv2d_ref(&x, &w, &[0], &ConvGeometry::square(3, 1, 0)).unwrap();
        assert_eq!(y.data(), &[9]);
    }

    #[test]
    fn matches_scatter_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let (x, w, b, g) = random_case(&mut rng);
            let y = conv2d_ref(&x, &w, &b, &g).unwrap();
            let expected = scatter_conv(&x, &w, &b, &g);
            assert_eq!(y.data().iter().map(|&v| v as i64).collect::<Vec<_>>(), expected);
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<u8>::zeros(&[2, 4, 4]).unwrap();
        let w = Tensor::<i32>::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(conv2d_ref(&x, &w, &[0], &ConvGeometry::square(3, 1, 0)).is_err());
        let w = Tensor::<i32>::zeros(&[1, 2, 3, 3]).unwrap();
        assert!(conv2d_ref(&x, &w, &[0, 1], &ConvGeometry::square(3, 1, 0)).is_err());
        assert!(fc_ref(&[1, 2], &Tensor::<i32>::zeros(&[2, 3]).unwrap(), &[0, 0]).is_err());
    }

    #[test]
    fn quantized_int8_is_exact_and_int5_substitutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (x, w, b, g) = random_case(&mut rng);
            let (psi, _) = decompose_tensor(&w, PrecisionMode::Int8).unwrap();
            assert_eq!(quantized_ref(&x, &psi, &b, &g).unwrap(), conv2d_ref(&x, &w, &b, &g).unwrap());
        }
        let x = Tensor::from_fn(&[2, 5, 5], |i| (i * 7 % 256) as u8).unwrap();
        let elevens = Tensor::from_vec(&[1, 2, 3, 3], vec![11; 18]).unwrap();
        let tens = Tensor::from_vec(&[1, 2, 3, 3], vec![10; 18]).unwrap();
        let (psi, _) = decompose_tensor(&elevens, PrecisionMode::Int5).unwrap();
        let g = ConvGeometry::square(3, 1, 0);
        assert_eq!(
            quantized_ref(&x, &psi, &[0], &g).unwrap(),
            conv2d_ref(&x, &tens, &[0], &g).unwrap()
        );
        let (zero_psi, _) =
            decompose_tensor(&Tensor::zeros(&[1, 2, 3, 3]).unwrap(), PrecisionMode::Int5).unwrap();
        assert!(quantized_ref(&x, &zero_psi, &[0], &g).unwrap().data().iter().all(|&v| v == 0));
    }

    #[test]
    fn fc_examples() {
        let eye = Tensor::from_fn(&[4, 4], |i| (i / 4 == i % 4) as i32).unwrap();
        assert_eq!(fc_ref(&[5, 6, 7, 8], &eye, &[0; 4]).unwrap(), vec![5, 6, 7, 8]);
        let ones = Tensor::from_vec(&[2, 2304], vec![1; 4608]).unwrap();
        assert_eq!(fc_ref(&[1; 2304], &ones, &[0, 0]).unwrap(), vec![2304, 2304]);
        assert_eq!(fc_ref(&[0; 4], &eye, &[3, -1, 0, 9]).unwrap(), vec![3, -1, 0, 9]);
    }

    proptest! {
        #[test]
        fn conv_is_linear_in_input(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, w, _, g) = random_case(&mut rng);
            let a = x.map(|&v| v / 2);
            let b = x.map(|&v| v - v / 2);
            let zero = vec![0; w.dims()[0]];
            let ya = conv2d_ref(&a, &w, &zero, &g).unwrap();
            let yb = conv2d_ref(&b, &w, &zero, &g).unwrap();
            let y = conv2d_ref(&x, &w, &zero, &g).unwrap();
            let sum: Vec<i32> = ya.data().iter().zip(yb.data()).map(|(p, q)| p + q).collect();
            prop_assert_eq!(sum, y.data().to_vec());
        }
    }
}
