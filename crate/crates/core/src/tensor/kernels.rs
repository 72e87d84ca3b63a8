//! Raw loops behind the graph primitives. All layouts are row-major NCHW.
//!
//! Batched kernels fan out per sample; any cross-sample reduction (weight
//! gradients) is summed in sample order so results do not depend on thread
//! scheduling.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    fn in_size(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_size(&self) -> usize {
        self.out_ch * self.out_h() * self.out_w()
    }

    /// Output positions `o` for which `o + k - padding` lands inside `[0, extent)`.
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k);
        let hi = (extent + self.padding).saturating_sub(k).min(out_extent);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: ConvDims,
) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let k = d.kernel;
    let mut out = vec![0.0; d.batch * d.out_size()];
    out.par_chunks_mut(d.out_size())
        .zip(input.par_chunks(d.in_size()))
        .for_each(|(out, inp)| {
            for o in 0..d.out_ch {
                let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                if let Some(b) = bias {
                    plane.iter_mut().for_each(|v| *v = b[o]);
                }
                for c in 0..d.in_ch {
                    let src = &inp[c * d.height * d.width..(c + 1) * d.height * d.width];
                    for ky in 0..k {
                        let (y0, y1) = d.valid(ky, d.height, oh);
                        for kx in 0..k {
                            let w = weight[((o * d.in_ch + c) * k + ky) * k + kx];
                            if w == 0.0 {
                                continue;
                            }
                            let (x0, x1) = d.valid(kx, d.width, ow);
                            for oy in y0..y1 {
                                let iy = oy + ky - d.padding;
                                let dst = &mut plane[oy * ow + x0..oy * ow + x1];
                                let s = &src[iy * d.width + x0 + kx - d.padding
                                    ..iy * d.width + x1 + kx - d.padding];
                                for (a, b) in dst.iter_mut().zip(s) {
                                    *a += w * b;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn conv2d_backward_input(grad_out: &[f64], weight: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let k = d.kernel;
    let mut grad_in = vec![0.0; d.batch * d.in_size()];
    grad_in
        .par_chunks_mut(d.in_size())
        .zip(grad_out.par_chunks(d.out_size()))
        .for_each(|(gin, gout)| {
            for o in 0..d.out_ch {
                let plane = &gout[o * oh * ow..(o + 1) * oh * ow];
                for c in 0..d.in_ch {
                    let dst = &mut gin[c * d.height * d.width..(c + 1) * d.height * d.width];
                    for ky in 0..k {
                        let (y0, y1) = d.valid(ky, d.height, oh);
                        for kx in 0..k {
                            let w = weight[((o * d.in_ch + c) * k + ky) * k + kx];
                            if w == 0.0 {
                                continue;
                            }
                            let (x0, x1) = d.valid(kx, d.width, ow);
                            for oy in y0..y1 {
                                let iy = oy + ky - d.padding;
                                let g = &plane[oy * ow + x0..oy * ow + x1];
                                let t = &mut dst[iy * d.width + x0 + kx - d.padding
                                    ..iy * d.width + x1 + kx - d.padding];
                                for (a, b) in t.iter_mut().zip(g) {
                                    *a += w * b;
                                }
                            }
                        }
                    }
                }
            }
        });
    grad_in
}

/// Returns (weight gradient, bias gradient).
pub(crate) fn conv2d_backward_params(
    grad_out: &[f64],
    input: &[f64],
    d: ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let k = d.kernel;
    let wlen = d.out_ch * d.in_ch * k * k;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_out
        .par_chunks(d.out_size())
        .zip(input.par_chunks(d.in_size()))
        .map(|(gout, inp)| {
            let mut gw = vec![0.0; wlen];
            let mut gb = vec![0.0; d.out_ch];
            for o in 0..d.out_ch {
                let plane = &gout[o * oh * ow..(o + 1) * oh * ow];
                gb[o] = plane.iter().sum();
                for c in 0..d.in_ch {
                    let src = &inp[c * d.height * d.width..(c + 1) * d.height * d.width];
                    for ky in 0..k {
                        let (y0, y1) = d.valid(ky, d.height, oh);
                        for kx in 0..k {
                            let (x0, x1) = d.valid(kx, d.width, ow);
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = oy + ky - d.padding;
                                let g = &plane[oy * ow + x0..oy * ow + x1];
                                let s = &src[iy * d.width + x0 + kx - d.padding
                                    ..iy * d.width + x1 + kx - d.padding];
                                acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[((o * d.in_ch + c) * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    let mut gw = vec![0.0; wlen];
    let mut gb = vec![0.0; d.out_ch];
    for (pw, pb) in &partials {
        add_into(&mut gw, pw);
        add_into(&mut gb, pb);
    }
    (gw, gb)
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (r, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *r += av * bv;
            }
        }
    });
    out
}

/// `grad_out [m,n] x b^T` -> `[m,k]`.
pub(crate) fn matmul_grad_a(grad_out: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let g = &grad_out[i * n..(i + 1) * n];
        for (p, r) in row.iter_mut().enumerate() {
            *r = g.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `a^T x grad_out` -> `[k,n]`, accumulated over rows of `a` in order.
pub(crate) fn matmul_grad_b(a: &[f64], grad_out: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (r, g) in row.iter_mut().zip(&grad_out[i * n..(i + 1) * n]) {
                *r += av * g;
            }
        }
    });
    out
}

/// 2x2 max pooling with stride 2 over `[planes, h, w]`. Returns the pooled
/// values and the flat input index of each maximum (first index wins ties).
pub(crate) fn maxpool2(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling over `[planes, h, w]`.
pub(crate) fn upsample2(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out[(p * oh + y) * ow + x] = input[(p * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad_out: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out[(p * h + y / 2) * w + x / 2] += grad_out[(p * oh + y) * ow + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_naive_definition() {
        let d = ConvDims {
            batch: 2,
            in_ch: 2,
            height: 4,
            width: 5,
            out_ch: 3,
            kernel: 3,
            padding: 1,
        };
        let input: Vec<f64> = (0..2 * 2 * 4 * 5).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let bias = vec![0.5, -0.25, 0.0];
        let out = conv2d_forward(&input, &weight, Some(&bias), d);
        for b in 0..2 {
            for o in 0..3 {
                for y in 0..4i64 {
                    for x in 0..5i64 {
                        let mut acc = bias[o];
                        for c in 0..2 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (iy, ix) = (y + ky - 1, x + kx - 1);
                                    if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                        continue;
                                    }
                                    acc += weight[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize]
                                        * input[((b * 2 + c) * 4 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                        let got = out[((b * 3 + o) * 4 + y as usize) * 5 + x as usize];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn valid_conv_without_padding_shrinks() {
        let d = ConvDims {
            batch: 1,
            in_ch: 1,
            height: 3,
            width: 3,
            out_ch: 1,
            kernel: 3,
            padding: 0,
        };
        let out = conv2d_forward(&[1.0; 9], &[1.0; 9], None, d);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn maxpool_picks_first_max() {
        let (v, arg) = maxpool2(&[1.0, 1.0, 0.0, 0.0], 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
