//! 2-D convolution kernels (im2col + GEMM) and their adjoints.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" output size for an odd kernel.
    pub fn same(kernel: usize, padding: Padding) -> Self {
        ConvSpec { stride: 1, pad: kernel / 2, padding }
    }
}

const OUTSIDE: usize = usize::MAX;

/// Source pixel for every (kernel tap, output pixel) pair.
struct Geometry {
    kernel: usize,
    out_h: usize,
    out_w: usize,
    in_hw: usize,
    table: Vec<usize>,
}

impl Geometry {
    fn new(in_h: usize, in_w: usize, kernel: usize, spec: ConvSpec) -> Result<Self> {
        if spec.stride == 0 {
            return Err(invalid("convolution stride must be positive"));
        }
        if in_h + 2 * spec.pad < kernel || in_w + 2 * spec.pad < kernel {
            return Err(invalid(format!(
                "{in_h}x{in_w} input too small for kernel {kernel} with padding {}",
                spec.pad
            )));
        }
        let too_small = |len: usize| len > 1 && spec.pad >= len;
        if spec.padding == Padding::Reflect && (too_small(in_h) || too_small(in_w)) {
            return Err(invalid(format!(
                "reflection padding {} needs input larger than {in_h}x{in_w}",
                spec.pad
            )));
        }
        let out_h = (in_h + 2 * spec.pad - kernel) / spec.stride + 1;
        let out_w = (in_w + 2 * spec.pad - kernel) / spec.stride + 1;
        let map = |pos: isize, len: usize| -> Option<usize> {
            let len = len as isize;
            if (0..len).contains(&pos) {
                return Some(pos as usize);
            }
            match spec.padding {
                Padding::Zero => None,
                // A single row or column reflects onto itself.
                Padding::Reflect if len == 1 => Some(0),
                Padding::Reflect => {
                    let r = if pos < 0 { -pos } else { 2 * (len - 1) - pos };
                    Some(r as usize)
                }
            }
        };
        let out_hw = out_h * out_w;
        let mut table = vec![OUTSIDE; kernel * kernel * out_hw];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ky * kernel + kx) * out_hw;
                for oy in 0..out_h {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let Some(sy) = map(iy, in_h) else { continue };
                    for ox in 0..out_w {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if let Some(sx) = map(ix, in_w) {
                            table[row + oy * out_w + ox] = sy * in_w + sx;
                        }
                    }
                }
            }
        }
        Ok(Geometry { kernel, out_h, out_w, in_hw: in_h * in_w, table })
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn im2col(&self, image: &[f64], channels: usize, col: &mut [f64]) {
        let per_channel = self.taps() * self.out_hw();
        for c in 0..channels {
            let src = &image[c * self.in_hw..(c + 1) * self.in_hw];
            let dst = &mut col[c * per_channel..(c + 1) * per_channel];
            for (d, &s) in dst.iter_mut().zip(&self.table) {
                *d = if s == OUTSIDE { 0.0 } else { src[s] };
            }
        }
    }

    fn col2im(&self, col: &[f64], channels: usize, image: &mut [f64]) {
        let per_channel = self.taps() * self.out_hw();
        for c in 0..channels {
            let src = &col[c * per_channel..(c + 1) * per_channel];
            let dst = &mut image[c * self.in_hw..(c + 1) * self.in_hw];
            for (&v, &s) in src.iter().zip(&self.table) {
                if s != OUTSIDE {
                    dst[s] += v;
                }
            }
        }
    }
}

fn check_weight(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<()> {
    let [cout, cin, kh, kw] = weight.shape();
    if kh != kw {
        return Err(invalid(format!("non-square kernel {kh}x{kw}")));
    }
    if cin != input.channels() {
        return Err(invalid(format!(
            "convolution expects {cin} input channels, got {}",
            input.channels()
        )));
    }
    if bias.shape() != [1, cout, 1, 1] {
        return Err(invalid(format!("bias shape {:?} for {cout} outputs", bias.shape())));
    }
    Ok(())
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    check_weight(input, weight, bias)?;
    let [n, cin, h, w] = input.shape();
    let [cout, _, k, _] = weight.shape();
    let geo = Geometry::new(h, w, k, spec)?;
    let ohw = geo.out_hw();
    let rows = cin * geo.taps();
    let mut out = Tensor::zeros([n, cout, geo.out_h, geo.out_w]);
    let mut col = vec![0.0; rows * ohw];
    let wmat = ArrayView2::from_shape((cout, rows), weight.data()).expect("weight layout");
    for b in 0..n {
        geo.im2col(&input.data()[b * cin * h * w..(b + 1) * cin * h * w], cin, &mut col);
        let cmat = ArrayView2::from_shape((rows, ohw), &col).expect("col layout");
        let dst = &mut out.data_mut()[b * cout * ohw..(b + 1) * cout * ohw];
        for (o, chunk) in dst.chunks_mut(ohw).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        let mut omat = ArrayViewMut2::from_shape((cout, ohw), dst).expect("out layout");
        general_mat_mul(1.0, &wmat, &cmat, 1.0, &mut omat);
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Adjoint of [`conv2d`]; only the requested gradients are formed.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: ConvSpec,
    want: [bool; 3],
) -> ConvGrads {
    let [n, cin, h, w] = input.shape();
    let [cout, _, k, _] = weight.shape();
    let geo = Geometry::new(h, w, k, spec).expect("geometry validated in forward");
    let ohw = geo.out_hw();
    let rows = cin * geo.taps();
    let [want_input, want_weight, want_bias] = want;

    let mut d_input = want_input.then(|| Tensor::zeros(input.shape()));
    let mut d_weight = want_weight.then(|| Tensor::zeros(weight.shape()));
    let mut d_bias = want_bias.then(|| Tensor::zeros([1, cout, 1, 1]));

    let wmat = ArrayView2::from_shape((cout, rows), weight.data()).expect("weight layout");
    let mut col = vec![0.0; rows * ohw];
    let mut dcol = vec![0.0; rows * ohw];
    for b in 0..n {
        let g = &grad_out.data()[b * cout * ohw..(b + 1) * cout * ohw];
        let gmat = ArrayView2::from_shape((cout, ohw), g).expect("grad layout");
        if let Some(db) = d_bias.as_mut() {
            for (o, chunk) in g.chunks(ohw).enumerate() {
                db.data_mut()[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            geo.im2col(&input.data()[b * cin * h * w..(b + 1) * cin * h * w], cin, &mut col);
            let cmat = ArrayView2::from_shape((rows, ohw), &col).expect("col layout");
            let mut dwmat =
                ArrayViewMut2::from_shape((cout, rows), dw.data_mut()).expect("weight layout");
            general_mat_mul(1.0, &gmat, &cmat.t(), 1.0, &mut dwmat);
        }
        if let Some(dx) = d_input.as_mut() {
            let mut dcmat = ArrayViewMut2::from_shape((rows, ohw), &mut dcol).expect("col layout");
            general_mat_mul(1.0, &wmat.t(), &gmat, 0.0, &mut dcmat);
            geo.col2im(&dcol, cin, &mut dx.data_mut()[b * cin * h * w..(b + 1) * cin * h * w]);
        }
    }
    ConvGrads { input: d_input, weight: d_weight, bias: d_bias }
}

/// Naive direct convolution, used only as a test oracle.
#[cfg(test)]
pub(crate) fn conv2d_direct(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec) -> Tensor {
    let [n, cin, h, w] = input.shape();
    let [cout, _, k, _] = weight.shape();
    let out_h = (h + 2 * spec.pad - k) / spec.stride + 1;
    let out_w = (w + 2 * spec.pad - k) / spec.stride + 1;
    let fetch = |b: usize, c: usize, y: isize, x: isize| -> f64 {
        let reflect = |p: isize, len: usize| -> Option<usize> {
            let len = len as isize;
            if p >= 0 && p < len {
                Some(p as usize)
            } else if spec.padding == Padding::Reflect {
                Some(if p < 0 { -p } else { 2 * (len - 1) - p } as usize)
            } else {
                None
            }
        };
        match (reflect(y, h), reflect(x, w)) {
            (Some(y), Some(x)) => input.at([b, c, y, x]),
            _ => 0.0,
        }
    };
    Tensor::from_fn([n, cout, out_h, out_w], |[b, o, oy, ox]| {
        let mut acc = bias.at([0, o, 0, 0]);
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let x = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    acc += weight.at([o, c, ky, kx]) * fetch(b, c, y, x);
                }
            }
        }
        acc
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gemm_path_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad, padding) in &[
            (3, 1, 1, Padding::Reflect),
            (3, 1, 1, Padding::Zero),
            (3, 2, 1, Padding::Zero),
            (1, 1, 0, Padding::Zero),
        ] {
            let spec = ConvSpec { stride, pad, padding };
            let x = random([2, 3, 7, 9], &mut rng);
            let w = random([4, 3, k, k], &mut rng);
            let b = random([1, 4, 1, 1], &mut rng);
            let fast = conv2d(&x, &w, &b, spec).unwrap();
            let slow = conv2d_direct(&x, &w, &b, spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> must equal <x, dx> + <w, dw> + <b, db> for a linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConvSpec::same(3, Padding::Reflect);
        let x = random([2, 2, 6, 5], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let zero_b = Tensor::zeros([1, 3, 1, 1]);
        let g = random([2, 3, 6, 5], &mut rng);
        let y = conv2d(&x, &w, &zero_b, spec).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let grads = conv2d_backward(&x, &w, &g, spec, [true, true, true]);
        let dx = grads.input.unwrap();
        let dw = grads.weight.unwrap();
        let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        let db = grads.bias.unwrap();
        assert!((db.sum() - g.sum()).abs() < 1e-10);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        let b = Tensor::zeros([1, 1, 1, 1]);
        assert!(conv2d(&x, &w, &b, ConvSpec::same(3, Padding::Zero)).is_err());
    }
}
