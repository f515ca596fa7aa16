//! Layer kernels on flat buffers: f64 forward/backward and a checked 32-bit
//! integer path. Activations are `[C, H, W]` or `[N]`, conv weights
//! `[K, C, KH, KW]`, linear weights `[OUT, IN]`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
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

    /// Input coordinate for output `(oy, ox)` and tap `(ky, kx)`, if it lies
    /// inside the unpadded input.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

pub(crate) fn conv2d(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0.0; g.k * oh * ow];
    for k in 0..g.k {
        let b = bias.map_or(0.0, |b| b[k]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..g.c {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                                acc += wt[((k * g.c + c) * g.kh + ky) * g.kw + kx] * x[(c * g.h + iy) * g.w + ix];
                            }
                        }
                    }
                }
                y[(k * oh + oy) * ow + ox] = acc + b;
            }
        }
    }
    y
}

/// Gradients `(dx, dw, db)` of a conv layer given the output gradient.
pub(crate) fn conv2d_backward(x: &[f64], wt: &[f64], gy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.k];
    for k in 0..g.k {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = gy[(k * oh + oy) * ow + ox];
                if d == 0.0 {
                    continue;
                }
                gb[k] += d;
                for c in 0..g.c {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                                let wi = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                                let xi = (c * g.h + iy) * g.w + ix;
                                gw[wi] += d * x[xi];
                                gx[xi] += d * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn linear(x: &[f64], wt: &[f64], bias: Option<&[f64]>, out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out)
        .map(|o| {
            let row = &wt[o * n..(o + 1) * n];
            let acc: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            acc + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

pub(crate) fn linear_backward(x: &[f64], wt: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; wt.len()];
    for (o, &d) in gy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &wt[o * n..(o + 1) * n];
        let grow = &mut gw[o * n..(o + 1) * n];
        for i in 0..n {
            grow[i] += d * x[i];
            gx[i] += d * row[i];
        }
    }
    (gx, gw, gy.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.window) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.window) / self.stride + 1
    }
}

/// Max pooling; also returns the flat input index chosen for each output
/// (first maximum in scan order).
pub(crate) fn maxpool(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = Vec::with_capacity(g.c * oh * ow);
    let mut arg = Vec::with_capacity(g.c * oh * ow);
    for c in 0..g.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let i = (c * g.h + oy * g.stride + dy) * g.w + ox * g.stride + dx;
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                y.push(best);
                arg.push(bi);
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward(gy: &[f64], arg: &[usize], in_len: usize) -> Vec<f64> {
    let mut gx = vec![0.0; in_len];
    for (&d, &i) in gy.iter().zip(arg) {
        gx[i] += d;
    }
    gx
}

pub(crate) fn avgpool(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let area = (g.window * g.window) as f64;
    let mut y = Vec::with_capacity(g.c * oh * ow);
    for c in 0..g.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        s += x[(c * g.h + oy * g.stride + dy) * g.w + ox * g.stride + dx];
                    }
                }
                y.push(s / area);
            }
        }
    }
    y
}

pub(crate) fn avgpool_backward(gy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let area = (g.window * g.window) as f64;
    let mut gx = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = gy[(c * oh + oy) * ow + ox] / area;
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        gx[(c * g.h + oy * g.stride + dy) * g.w + ox * g.stride + dx] += d;
                    }
                }
            }
        }
    }
    gx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Overflow;

/// Integer convolution with a 32-bit accumulator; any overflowing product or
/// partial sum is reported.
pub(crate) fn conv2d_int(x: &[i32], wt: &[i32], g: &ConvGeom) -> Result<Vec<i32>, Overflow> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0i32; g.k * oh * ow];
    for k in 0..g.k {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc: i32 = 0;
                for c in 0..g.c {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                                let p = wt[((k * g.c + c) * g.kh + ky) * g.kw + kx]
                                    .checked_mul(x[(c * g.h + iy) * g.w + ix])
                                    .ok_or(Overflow)?;
                                acc = acc.checked_add(p).ok_or(Overflow)?;
                            }
                        }
                    }
                }
                y[(k * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(y)
}

pub(crate) fn linear_int(x: &[i32], wt: &[i32], out: usize) -> Result<Vec<i32>, Overflow> {
    let n = x.len();
    (0..out)
        .map(|o| {
            wt[o * n..(o + 1) * n].iter().zip(x).try_fold(0i32, |acc, (&w, &v)| {
                acc.checked_add(w.checked_mul(v).ok_or(Overflow)?).ok_or(Overflow)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_extent() {
        let g = ConvGeom {
            c: 1,
            h: 5,
            w: 7,
            k: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (3, 4));
    }

    #[test]
    fn integer_conv_detects_overflow() {
        let g = ConvGeom {
            c: 1,
            h: 1,
            w: 2,
            k: 1,
            kh: 1,
            kw: 2,
            stride: 1,
            pad: 0,
        };
        let big = i32::MAX / 2 + 1;
        assert_eq!(conv2d_int(&[1, 1], &[big, big], &g), Err(Overflow));
        assert_eq!(conv2d_int(&[1, 1], &[3, 4], &g), Ok(vec![7]));
        assert_eq!(linear_int(&[i32::MAX, 1], &[2, 0], 1), Err(Overflow));
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let g = PoolGeom {
            c: 1,
            h: 2,
            w: 2,
            window: 2,
            stride: 2,
        };
        let (y, arg) = maxpool(&[1.0, 3.0, 3.0, 0.0], &g);
        assert_eq!((y, arg), (vec![3.0], vec![1]));
    }
}
