//! Patch extraction for convolution-as-matmul.
//!
//! A stride-s convolution is evaluated by lowering the input to a patch
//! matrix (`im2col`), multiplying by a [c*kh*kw, oc] weight matrix, and
//! reordering back to channel-major maps. `col2im` is the adjoint scatter
//! used by the backward pass.

/// Geometry of one 2-D convolution over a [batch, in_ch*h*w] input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// [batch, c*h*w] -> [batch*oh*ow, c*kh*kw], zero padding outside the input.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.in_ch * g.kh * g.kw;
    let mut cols = vec![0.0; g.batch * oh * ow * patch];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * patch;
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[row + (c * g.kh + ky) * g.kw + kx] = input
                                [((b * g.in_ch + c) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let patch = g.in_ch * g.kh * g.kw;
    let mut input = vec![0.0; g.batch * g.in_ch * g.h * g.w];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * patch;
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            input[((b * g.in_ch + c) * g.h + iy as usize) * g.w + ix as usize] +=
                                cols[row + (c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    input
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_matches_known_chains() {
        // stride-2 4x4 kernels with pads (1, 1, 2): 28 -> 14 -> 7 -> 4
        let g1 = ConvGeom { batch: 1, in_ch: 1, h: 28, w: 28, kh: 4, kw: 4, stride: 2, pad: 1 };
        assert_eq!((g1.out_h(), g1.out_w()), (14, 14));
        let g2 = ConvGeom { h: 14, w: 14, ..g1 };
        assert_eq!(g2.out_h(), 7);
        let g3 = ConvGeom { h: 7, w: 7, pad: 2, ..g1 };
        assert_eq!(g3.out_h(), 4);
    }

    #[test]
    fn im2col_extracts_expected_patch() {
        // 1x1x3x3 input, 2x2 kernel, stride 1, no pad -> 4 patches
        let g = ConvGeom { batch: 1, in_ch: 1, h: 3, w: 3, kh: 2, kw: 2, stride: 1, pad: 0 };
        let input: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let cols = im2col(&input, &g);
        assert_eq!(cols.len(), 4 * 4);
        assert_eq!(&cols[0..4], &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(&cols[12..16], &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let g = ConvGeom { batch: 2, in_ch: 3, h: 5, w: 5, kh: 4, kw: 4, stride: 2, pad: 1 };
        let mut rng = crate::rng::SeededRng::new(123);
        let x: Vec<f64> = (0..g.batch * g.in_ch * g.h * g.w)
            .map(|_| rng.uniform_range(-1.0, 1.0))
            .collect();
        let cols_len = g.batch * g.out_h() * g.out_w() * g.in_ch * g.kh * g.kw;
        let y: Vec<f64> = (0..cols_len).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
