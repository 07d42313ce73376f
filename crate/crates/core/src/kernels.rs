//! Slice-level neural kernels: 2-D convolution, 2x2 max pooling, 2x2/stride-2
//! transposed convolution, channel softmax, and the small dense routines the
//! graph bottleneck needs. Forward and backward pairs operate on row-major
//! buffers; the tape wires them together.

use crate::tensor::Real;

/// Spatial geometry of a conv2d call, resolved from input and kernel shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, String> {
        if input_shape.len() != 3 {
            return Err(format!("conv2d input must be [C,H,W], got {input_shape:?}"));
        }
        if kernel_shape.len() != 4 {
            return Err(format!(
                "conv2d kernel must be [out,in,kh,kw], got {kernel_shape:?}"
            ));
        }
        let (in_ch, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        let (out_ch, k_in, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if k_in != in_ch {
            return Err(format!(
                "kernel expects {k_in} input channels, input has {in_ch}"
            ));
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err("kernel dims and stride must be >= 1".to_string());
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom {
            in_ch,
            out_ch,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }
}

/// out[oc,oy,ox] = bias[oc] + sum over (ic,ky,kx) of in * kernel, zero padded.
pub fn conv2d_forward(g: &ConvGeom, input: &[Real], kernel: &[Real], bias: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; g.out_ch * g.out_h * g.out_w];
    for oc in 0..g.out_ch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = bias[oc];
                for ic in 0..g.in_ch {
                    let in_base = ic * g.h * g.w;
                    let k_base = ((oc * g.in_ch + ic) * g.kh) * g.kw;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = in_base + iy as usize * g.w;
                        let krow = k_base + ky * g.kw;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc += input[row + ix as usize] * kernel[krow + kx];
                        }
                    }
                }
                out[(oc * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    out
}

/// Accumulates input/kernel/bias gradients from the output gradient.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[Real],
    kernel: &[Real],
    grad_out: &[Real],
    grad_input: &mut [Real],
    grad_kernel: &mut [Real],
    grad_bias: &mut [Real],
) {
    for oc in 0..g.out_ch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let go = grad_out[(oc * g.out_h + oy) * g.out_w + ox];
                if go == 0.0 {
                    continue;
                }
                grad_bias[oc] += go;
                for ic in 0..g.in_ch {
                    let in_base = ic * g.h * g.w;
                    let k_base = ((oc * g.in_ch + ic) * g.kh) * g.kw;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = in_base + iy as usize * g.w;
                        let krow = k_base + ky * g.kw;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            grad_input[row + ix as usize] += go * kernel[krow + kx];
                            grad_kernel[krow + kx] += go * input[row + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2/stride-2 max pool. Returns pooled values and the flat argmax index of
/// each window, first index winning ties in row-major window order.
pub fn maxpool2_forward(c: usize, h: usize, w: usize, input: &[Real]) -> (Vec<Real>, Vec<u32>) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = Real::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ch * h + (2 * oy + dy)) * w + (2 * ox + dx);
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(argmax: &[u32], grad_out: &[Real], grad_input: &mut [Real]) {
    for (i, &src) in argmax.iter().enumerate() {
        grad_input[src as usize] += grad_out[i];
    }
}

/// 2x2/stride-2 transposed convolution: scatter each input site through the
/// kernel, exactly doubling the spatial size. Kernel layout [out,in,2,2].
pub fn conv_transpose2_forward(
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    input: &[Real],
    kernel: &[Real],
    bias: &[Real],
) -> Vec<Real> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; out_ch * oh * ow];
    for oc in 0..out_ch {
        let base = oc * oh * ow;
        for v in &mut out[base..base + oh * ow] {
            *v = bias[oc];
        }
        for ic in 0..in_ch {
            let k_base = (oc * in_ch + ic) * 4;
            for y in 0..h {
                for x in 0..w {
                    let v = input[(ic * h + y) * w + x];
                    if v == 0.0 {
                        continue;
                    }
                    for dy in 0..2 {
                        let orow = base + (2 * y + dy) * ow + 2 * x;
                        out[orow] += v * kernel[k_base + dy * 2];
                        out[orow + 1] += v * kernel[k_base + dy * 2 + 1];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2_backward(
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    input: &[Real],
    kernel: &[Real],
    grad_out: &[Real],
    grad_input: &mut [Real],
    grad_kernel: &mut [Real],
    grad_bias: &mut [Real],
) {
    let (oh, ow) = (2 * h, 2 * w);
    for oc in 0..out_ch {
        let base = oc * oh * ow;
        for v in &grad_out[base..base + oh * ow] {
            grad_bias[oc] += v;
        }
        for ic in 0..in_ch {
            let k_base = (oc * in_ch + ic) * 4;
            for y in 0..h {
                for x in 0..w {
                    let in_idx = (ic * h + y) * w + x;
                    let v = input[in_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let go = grad_out[base + (2 * y + dy) * ow + 2 * x + dx];
                            grad_input[in_idx] += go * kernel[k_base + dy * 2 + dx];
                            grad_kernel[k_base + dy * 2 + dx] += go * v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-pixel softmax over the channel axis of a [C,H,W] buffer, computed with
/// max subtraction.
pub fn softmax_channels_forward(c: usize, hw: usize, input: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let mut max = Real::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(input[ch * hw + p]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (input[ch * hw + p] - max).exp();
            out[ch * hw + p] = e;
            sum += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= sum;
        }
    }
    out
}

/// d_x[c] = y[c] * (g[c] - sum_k g[k] * y[k]) per pixel.
pub fn softmax_channels_backward(
    c: usize,
    hw: usize,
    output: &[Real],
    grad_out: &[Real],
    grad_input: &mut [Real],
) {
    for p in 0..hw {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += grad_out[ch * hw + p] * output[ch * hw + p];
        }
        for ch in 0..c {
            let i = ch * hw + p;
            grad_input[i] += output[i] * (grad_out[i] - dot);
        }
    }
}

/// out = x . w^T + b for x: [n, c_in], w: [c_out, c_in], b: [c_out].
pub fn linear_forward(
    n: usize,
    c_in: usize,
    c_out: usize,
    x: &[Real],
    w: &[Real],
    b: &[Real],
) -> Vec<Real> {
    let mut out = vec![0.0; n * c_out];
    for i in 0..n {
        let xrow = &x[i * c_in..(i + 1) * c_in];
        for o in 0..c_out {
            let wrow = &w[o * c_in..(o + 1) * c_in];
            let mut acc = b[o];
            for k in 0..c_in {
                acc += xrow[k] * wrow[k];
            }
            out[i * c_out + o] = acc;
        }
    }
    out
}

pub fn linear_backward(
    n: usize,
    c_in: usize,
    c_out: usize,
    x: &[Real],
    w: &[Real],
    grad_out: &[Real],
    grad_x: &mut [Real],
    grad_w: &mut [Real],
    grad_b: &mut [Real],
) {
    for i in 0..n {
        for o in 0..c_out {
            let go = grad_out[i * c_out + o];
            if go == 0.0 {
                continue;
            }
            grad_b[o] += go;
            for k in 0..c_in {
                grad_x[i * c_in + k] += go * w[o * c_in + k];
                grad_w[o * c_in + k] += go * x[i * c_in + k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: Real = 1e-6;

    /// Quadruple-loop reference convolution, written independently of
    /// conv2d_forward's traversal order.
    fn conv_oracle(g: &ConvGeom, input: &[Real], kernel: &[Real], bias: &[Real]) -> Vec<Real> {
        let mut out = vec![0.0; g.out_ch * g.out_h * g.out_w];
        for oc in 0..g.out_ch {
            for ic in 0..g.in_ch {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kv = kernel[((oc * g.in_ch + ic) * g.kh + ky) * g.kw + kx];
                        for oy in 0..g.out_h {
                            for ox in 0..g.out_w {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy >= 0
                                    && (iy as usize) < g.h
                                    && ix >= 0
                                    && (ix as usize) < g.w
                                {
                                    out[(oc * g.out_h + oy) * g.out_w + ox] +=
                                        kv * input[(ic * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        for oc in 0..g.out_ch {
            for p in 0..g.out_h * g.out_w {
                out[oc * g.out_h * g.out_w + p] += bias[oc];
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> Real {
        // Small deterministic generator for oracle fixtures.
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 33) as Real / (1u64 << 31) as Real) - 1.0
    }

    #[test]
    fn conv_ones_3x3_padded() {
        // All-ones 3x3 input and kernel, padding 1: center sees the full 9-cell
        // window, edge midpoints 6, corners 4.
        let g = ConvGeom::resolve(&[1, 3, 3], &[1, 1, 3, 3], 1, 1).unwrap();
        let out = conv2d_forward(&g, &[1.0; 9], &[1.0; 9], &[0.0]);
        let expected = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(out, expected);
    }

    #[test]
    fn conv_identity_kernel() {
        let g = ConvGeom::resolve(&[1, 4, 5], &[1, 1, 1, 1], 1, 0).unwrap();
        let input: Vec<Real> = (0..20).map(|v| v as Real * 0.5 - 3.0).collect();
        let out = conv2d_forward(&g, &input, &[1.0], &[0.0]);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut seed = 11u64;
        for trial in 0..10 {
            let (stride, padding) = [(1, 0), (1, 1), (2, 1)][trial % 3];
            let g = ConvGeom::resolve(&[2, 5, 5], &[3, 2, 3, 3], stride, padding).unwrap();
            let input: Vec<Real> = (0..2 * 25).map(|_| lcg(&mut seed)).collect();
            let kernel: Vec<Real> = (0..3 * 2 * 9).map(|_| lcg(&mut seed)).collect();
            let bias: Vec<Real> = (0..3).map(|_| lcg(&mut seed)).collect();
            let got = conv2d_forward(&g, &input, &kernel, &bias);
            let want = conv_oracle(&g, &input, &kernel, &bias);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < TOL, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_geometry_errors() {
        assert!(ConvGeom::resolve(&[2, 4, 4], &[1, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeom::resolve(&[1, 2, 2], &[1, 1, 5, 5], 1, 0).is_err());
    }

    #[test]
    fn maxpool_single_window() {
        let (out, arg) = maxpool2_forward(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_constant_input() {
        let (out, arg) = maxpool2_forward(1, 4, 4, &[7.0; 16]);
        assert_eq!(out, vec![7.0; 4]);
        // Ties route to the first index in row-major window order.
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut seed = 3u64;
        let input: Vec<Real> = (0..2 * 36).map(|_| lcg(&mut seed)).collect();
        let (out, _) = maxpool2_forward(2, 6, 6, &input);
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut want = Real::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            want = want.max(input[(c * 6 + 2 * oy + dy) * 6 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(out[(c * 3 + oy) * 3 + ox], want);
                }
            }
        }
    }

    #[test]
    fn transpose_single_site_expansion() {
        // One input value v through kernel [[a,b],[c,d]] scatters to [[va,vb],[vc,vd]].
        let out = conv_transpose2_forward(
            1,
            1,
            1,
            1,
            &[3.0],
            &[0.5, -1.0, 2.0, 0.25],
            &[0.0],
        );
        assert_eq!(out, vec![1.5, -3.0, 6.0, 0.75]);
    }

    #[test]
    fn transpose_zero_input_broadcasts_bias() {
        let out = conv_transpose2_forward(1, 2, 2, 2, &[0.0; 4], &[1.0; 8], &[0.5, -2.0]);
        assert_eq!(&out[..16], &[0.5; 16]);
        assert_eq!(&out[16..], &[-2.0; 16]);
    }

    #[test]
    fn transpose_matches_scatter_oracle() {
        let mut seed = 29u64;
        let input: Vec<Real> = (0..9).map(|_| lcg(&mut seed)).collect();
        let kernel: Vec<Real> = (0..2 * 4).map(|_| lcg(&mut seed)).collect();
        let bias = [0.3, -0.1];
        let got = conv_transpose2_forward(1, 2, 3, 3, &input, &kernel, &bias);
        // Independent scatter-add accumulation.
        let mut want = vec![0.0; 2 * 36];
        for oc in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            want[(oc * 6 + 2 * y + dy) * 6 + 2 * x + dx] +=
                                input[y * 3 + x] * kernel[oc * 4 + dy * 2 + dx];
                        }
                    }
                }
            }
            for p in 0..36 {
                want[oc * 36 + p] += bias[oc];
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < TOL);
        }
    }

    #[test]
    fn transpose_is_adjoint_of_strided_conv() {
        // <T(x), z> == <x, S(z)> where S is the stride-2 valid conv whose
        // kernel is the transpose kernel with in/out roles swapped.
        let mut seed = 5u64;
        let x: Vec<Real> = (0..2 * 9).map(|_| lcg(&mut seed)).collect();
        let z: Vec<Real> = (0..3 * 36).map(|_| lcg(&mut seed)).collect();
        let kernel: Vec<Real> = (0..3 * 2 * 4).map(|_| lcg(&mut seed)).collect();
        let tx = conv_transpose2_forward(2, 3, 3, 3, &x, &kernel, &[0.0; 3]);
        let lhs: Real = tx.iter().zip(&z).map(|(a, b)| a * b).sum();

        // S(z): conv z [3,6,6] with kernel viewed as [in=3 -> out=2].
        let mut swapped = vec![0.0; 2 * 3 * 4];
        for oc in 0..3 {
            for ic in 0..2 {
                for t in 0..4 {
                    swapped[(ic * 3 + oc) * 4 + t] = kernel[(oc * 2 + ic) * 4 + t];
                }
            }
        }
        let g = ConvGeom::resolve(&[3, 6, 6], &[2, 3, 2, 2], 2, 0).unwrap();
        let sz = conv2d_forward(&g, &z, &swapped, &[0.0; 2]);
        let rhs: Real = sz.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let out = softmax_channels_forward(2, 1, &[0.0, 0.0]);
        assert!((out[0] - 0.5).abs() < TOL && (out[1] - 0.5).abs() < TOL);

        let out = softmax_channels_forward(2, 1, &[1000.0, 0.0]);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] > 0.999_999 && out[1] < 1e-6);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let mut seed = 17u64;
        let logits: Vec<Real> = (0..3 * 4).map(|_| lcg(&mut seed) * 4.0).collect();
        let out = softmax_channels_forward(3, 4, &logits);
        for p in 0..4 {
            let exps: Vec<f64> = (0..3).map(|c| (logits[c * 4 + p] as f64).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut col = 0.0;
            for c in 0..3 {
                let want = (exps[c] / sum) as Real;
                assert!((out[c * 4 + p] - want).abs() < TOL);
                col += out[c * 4 + p];
            }
            assert!((col - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_matches_by_hand() {
        // x = [[1,2],[3,4]], w = [[1,0],[0,1],[1,1]], b = [0.5,0,-1]
        let out = linear_forward(
            2,
            2,
            3,
            &[1.0, 2.0, 3.0, 4.0],
            &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            &[0.5, 0.0, -1.0],
        );
        assert_eq!(out, vec![1.5, 2.0, 2.0, 3.5, 4.0, 6.0]);
    }
}
