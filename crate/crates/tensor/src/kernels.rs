//! Slice-level kernels shared by the graph's forward and backward passes.
//!
//! Layouts are NCHW for feature maps and OIKhKw for correlation kernels.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn in_len(&self) -> usize {
        self.batch * self.in_ch * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_ch * self.out_h * self.out_w
    }

    pub fn kernel_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    /// Output columns `ox` for which `ox*stride + kj - pad` lands inside the input.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        valid_range(self.out_w, self.in_w, self.stride, kj, self.pad)
    }

    #[inline]
    fn valid_rows(&self, ki: usize) -> (usize, usize) {
        valid_range(self.out_h, self.in_h, self.stride, ki, self.pad)
    }
}

/// Half-open range of output positions whose tap `k` reads a real input sample.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let limit = in_len + pad;
    let hi = if limit > k {
        ((limit - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl Conv2dGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one sample into `[C·kh·kw, out_h·out_w]` columns.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        cols.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.in_ch {
            let xbase = c * self.in_h * self.in_w;
            for ki in 0..self.kh {
                let (r0, r1) = self.valid_rows(ki);
                for kj in 0..self.kw {
                    let (c0, c1) = self.valid_cols(kj);
                    let row = ((c * self.kh + ki) * self.kw + kj) * plane;
                    for oy in r0..r1 {
                        let xrow = xbase + (oy * self.stride + ki - self.pad) * self.in_w;
                        let crow = row + oy * self.out_w;
                        for ox in c0..c1 {
                            cols[crow + ox] = x[xrow + ox * self.stride + kj - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2dGeom::im2col`]: accumulates columns into one sample.
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.in_ch {
            let xbase = c * self.in_h * self.in_w;
            for ki in 0..self.kh {
                let (r0, r1) = self.valid_rows(ki);
                for kj in 0..self.kw {
                    let (c0, c1) = self.valid_cols(kj);
                    let row = ((c * self.kh + ki) * self.kw + kj) * plane;
                    for oy in r0..r1 {
                        let xrow = xbase + (oy * self.stride + ki - self.pad) * self.in_w;
                        let crow = row + oy * self.out_w;
                        for ox in c0..c1 {
                            x[xrow + ox * self.stride + kj - self.pad] += cols[crow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = x ⋆ w` (what deep-learning frameworks call conv2d).
pub fn corr_forward(g: &Conv2dGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (plane, patch) = (g.out_plane(), g.patch_len());
    let sample_in = g.in_ch * g.in_h * g.in_w;
    let mut y = vec![0.0; g.out_len()];
    let mut cols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        g.im2col(&x[n * sample_in..(n + 1) * sample_in], &mut cols);
        let yn = &mut y[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        matmul_acc(w, &cols, yn, g.out_ch, patch, plane);
    }
    y
}

/// Adjoint of [`corr_forward`] with respect to its input: scatters `gy` back
/// through `w`. Also the forward pass of a transposed convolution.
pub fn corr_backward_data(g: &Conv2dGeom, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let (plane, patch) = (g.out_plane(), g.patch_len());
    let sample_in = g.in_ch * g.in_h * g.in_w;
    let mut gx = vec![0.0; g.in_len()];
    let mut cols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let gyn = &gy[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        matmul_tn_acc(w, gyn, &mut cols, g.out_ch, patch, plane);
        g.col2im(&cols, &mut gx[n * sample_in..(n + 1) * sample_in]);
    }
    gx
}

/// Gradient of [`corr_forward`] with respect to its kernel.
pub fn corr_backward_weight(g: &Conv2dGeom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let (plane, patch) = (g.out_plane(), g.patch_len());
    let sample_in = g.in_ch * g.in_h * g.in_w;
    let mut gw = vec![0.0; g.kernel_len()];
    let mut cols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        g.im2col(&x[n * sample_in..(n + 1) * sample_in], &mut cols);
        let gyn = &gy[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        matmul_nt_acc(gyn, &cols, &mut gw, g.out_ch, plane, patch);
    }
    gw
}

/// Row-major `[m,k] x [k,n]`, accumulated into `out`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T b` with `a: [k,m]`, `b: [k,n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a b^T` with `a: [m,k]`, `b: [n,k]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Source index in the input for each output element of a pixel shuffle
/// `(N, C·r², H, W) -> (N, C, H·r, W·r)`.
pub fn pixel_shuffle_map(n: usize, c_out: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let c_in = c_out * r * r;
    let (oh, ow) = (h * r, w * r);
    let mut map = Vec::with_capacity(n * c_out * oh * ow);
    for b in 0..n {
        for c in 0..c_out {
            for y in 0..oh {
                for x in 0..ow {
                    let (i, j) = (y % r, x % r);
                    let src_c = c * r * r + i * r + j;
                    map.push(((b * c_in + src_c) * h + y / r) * w + x / r);
                }
            }
        }
    }
    map
}

/// Source index for each output element of a general axis permutation.
pub fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        let src: usize = idx
            .iter()
            .zip(axes)
            .map(|(&i, &a)| i * in_strides[a])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for in_len in 1..9 {
            for stride in 1..4 {
                for pad in 0..4 {
                    for k in 0..6 {
                        if in_len + 2 * pad < k + 1 {
                            continue;
                        }
                        let out_len = (in_len + 2 * pad - (k + 1)) / stride + 1;
                        let (lo, hi) = valid_range(out_len, in_len, stride, k, pad);
                        for o in 0..out_len {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < in_len;
                            assert_eq!(inside, o >= lo && o < hi, "{in_len} {stride} {pad} {k} {o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn four_channel_pixel_shuffle_places_quadrants() {
        let src = [1.0, 2.0, 3.0, 4.0];
        let map = pixel_shuffle_map(1, 1, 1, 1, 2);
        let out: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
