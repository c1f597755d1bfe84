//! Convolution via im2col + GEMM, nearest-neighbour upsampling and channel
//! concatenation.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1 stride-1 unpadded convolutions read the input directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl ConvGeom {
    /// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Appends the `[Cin*k*k, Ho*Wo]` patch matrix of one sample to `cols`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut Vec<f64>) {
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        cols.extend(std::iter::repeat_n(0.0, g.wo));
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    cols.extend(std::iter::repeat_n(0.0, lo));
                    if hi > lo {
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            cols.extend_from_slice(&srow[first..first + (hi - lo)]);
                        } else {
                            cols.extend(srow[first..].iter().step_by(g.stride).take(hi - lo));
                        }
                    }
                    cols.extend(std::iter::repeat_n(0.0, g.wo - hi));
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.pad;
                    let drow = &mut dst[iy as usize * g.w + first..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s);
                    } else {
                        drow.iter_mut()
                            .step_by(g.stride)
                            .zip(srow)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

struct ConvBack {
    geom: ConvGeom,
    /// im2col buffers per sample; empty for pointwise convolutions.
    cols: Vec<f64>,
}

impl Backward for ConvBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = &self.geom;
        let (x, weight) = (inputs[0].data(), inputs[1].data());
        let (patch, plane) = (g.patch(), g.out_plane());
        let in_sz = g.cin * g.h * g.w;
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; weight.len()]);
        let mut db = needs[2].then(|| vec![0.0; g.cout]);
        let mut dcols = vec![0.0; if g.is_pointwise() { 0 } else { patch * plane }];

        for b in 0..g.batch {
            let gb = &grad[b * g.cout * plane..(b + 1) * g.cout * plane];
            let cols_b: &[f64] = if g.is_pointwise() {
                &x[b * in_sz..(b + 1) * in_sz]
            } else {
                &self.cols[b * patch * plane..(b + 1) * patch * plane]
            };
            if let Some(dw) = dw.as_mut() {
                gemm(g.cout, plane, patch, gb, false, cols_b, true, dw, 1.0);
            }
            if let Some(db) = db.as_mut() {
                for (co, d) in db.iter_mut().enumerate() {
                    *d += gb[co * plane..(co + 1) * plane].iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
                if g.is_pointwise() {
                    gemm(patch, g.cout, plane, weight, true, gb, false, dxb, 0.0);
                } else {
                    gemm(
                        patch, g.cout, plane, weight, true, gb, false, &mut dcols, 0.0,
                    );
                    col2im(&dcols, g, dxb);
                }
            }
        }
        vec![dx, dw, db]
    }
}

struct UpsampleBack {
    dims: (usize, usize, usize, usize),
}

impl Backward for UpsampleBack {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (b, c, h, w) = self.dims;
        let mut dx = vec![0.0; b * c * h * w];
        for p in 0..b * c {
            let src = &grad[p * 4 * h * w..(p + 1) * 4 * h * w];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                }
            }
        }
        vec![Some(dx)]
    }
}

struct ConcatBack {
    batch: usize,
    split: usize,
    total: usize,
}

impl Backward for ConcatBack {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let per = grad.len() / self.batch;
        let (mut da, mut db) = (Vec::new(), Vec::new());
        for b in 0..self.batch {
            let row = &grad[b * per..(b + 1) * per];
            let cut = per * self.split / self.total;
            da.extend_from_slice(&row[..cut]);
            db.extend_from_slice(&row[cut..]);
        }
        vec![needs[0].then_some(da), needs[1].then_some(db)]
    }
}

impl Tape {
    /// 2-D cross-correlation. `weight` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, cin, h, w) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be odd and square, got {kh}x{kw}"),
            ));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias shape {:?}, expected [{cout}]",
                    self.value(bias).shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kh {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input smaller than {kh}x{kh} kernel"),
            ));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kh) / stride + 1,
        };
        let (patch, plane) = (geom.patch(), geom.out_plane());
        let in_sz = cin * h * w;
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let bs = self.value(bias).data();

        let mut cols = Vec::with_capacity(if geom.is_pointwise() {
            0
        } else {
            batch * patch * plane
        });
        let mut out = vec![0.0; batch * cout * plane];
        for b in 0..batch {
            let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
            for (co, bias) in bs.iter().enumerate() {
                ob[co * plane..(co + 1) * plane].fill(*bias);
            }
            let xb = &xs[b * in_sz..(b + 1) * in_sz];
            if geom.is_pointwise() {
                gemm(cout, patch, plane, ws, false, xb, false, ob, 1.0);
            } else {
                im2col(xb, &geom, &mut cols);
                let cb = &cols[b * patch * plane..(b + 1) * patch * plane];
                gemm(cout, patch, plane, ws, false, cb, false, ob, 1.0);
            }
        }
        let out = Tensor::new(vec![batch, cout, geom.ho, geom.wo], out)?;
        Ok(self.record(out, &[x, weight, bias], ConvBack { geom, cols }))
    }

    /// Replicates every pixel into a 2x2 block.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let dims @ (b, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * 4 * h * w];
        for p in 0..b * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        Ok(self.record(out, &[x], UpsampleBack { dims }))
    }

    /// Concatenates two `[B, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (sa, sb) = (ca * ha * wa, cb * hb * wb);
        let mut out = Vec::with_capacity(ba * (sa + sb));
        for i in 0..ba {
            out.extend_from_slice(&self.value(a).data()[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&self.value(b).data()[i * sb..(i + 1) * sb]);
        }
        let out = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.record(
            out,
            &[a, b],
            ConcatBack {
                batch: ba,
                split: ca,
                total: ca + cb,
            },
        ))
    }
}
