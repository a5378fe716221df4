//! CPU convolution and pooling kernels with hand-written backward passes.
//!
//! Convolution is lowered to im2col + matmul so the heavy lifting runs through
//! the gemm backend for both directions. Pooling supports overlapping windows
//! and padding, which the stock backend cannot differentiate.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Geom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self { kh: k, kw: k, sh: stride, sw: stride, ph: pad, pw: pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.ph, w + 2 * self.pw);
        if hp < self.kh || wp < self.kw {
            candle_core::bail!("input {h}x{w} smaller than kernel {}x{}", self.kh, self.kw);
        }
        Ok(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }

    fn is_pointwise(&self) -> bool {
        *self == Self::square(1, 1, 0)
    }
}

fn f32_slice<'a>(storage: &'a CpuStorage, layout: &Layout) -> Result<&'a [f32]> {
    let data = match storage {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("only f32 tensors are supported"),
    };
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

fn dims4(layout: &Layout) -> Result<(usize, usize, usize, usize)> {
    layout.shape().dims4()
}

/// Calls `f(col_index, src_index)` for every in-bounds (row, column) cell of
/// the im2col matrix belonging to row `row` = (c, ky, kx).
#[inline]
fn for_each_cell(
    g: &Geom,
    (n, h, w): (usize, usize, usize),
    (ho, wo): (usize, usize),
    c: usize,
    ky: usize,
    kx: usize,
    channels: usize,
    mut f: impl FnMut(usize, usize),
) {
    let plane = ho * wo;
    for b in 0..n {
        let src_base = (b * channels + c) * h * w;
        for oy in 0..ho {
            let iy = (oy * g.sh + ky) as isize - g.ph as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let row_base = src_base + iy as usize * w;
            let col_base = b * plane + oy * wo;
            for ox in 0..wo {
                let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                f(col_base + ox, row_base + ix as usize);
            }
        }
    }
}

/// (N, C, H, W) -> (C*kh*kw, N*Ho*Wo).
struct Im2Col(Geom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let src = f32_slice(storage, layout)?;
        let (n, c, h, w) = dims4(layout)?;
        let g = &self.0;
        let (ho, wo) = g.out_hw(h, w)?;
        let cols = n * ho * wo;
        let rows = c * g.kh * g.kw;
        let mut dst = vec![0f32; rows * cols];
        for ch in 0..c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ch * g.kh + ky) * g.kw + kx;
                    let out = &mut dst[row * cols..(row + 1) * cols];
                    for_each_cell(g, (n, h, w), (ho, wo), ch, ky, kx, c, |j, i| out[j] = src[i]);
                }
            }
        }
        Ok((CpuStorage::F32(dst), Shape::from((rows, cols))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let op = Col2Im { geom: self.0, n, c, h, w };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

/// Adjoint of [`Im2Col`]: scatters-adds columns back to (N, C, H, W).
struct Col2Im {
    geom: Geom,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let src = f32_slice(storage, layout)?;
        let Self { geom: g, n, c, h, w } = *self;
        let (ho, wo) = g.out_hw(h, w)?;
        let cols = n * ho * wo;
        if layout.shape().dims() != [c * g.kh * g.kw, cols] {
            candle_core::bail!("col2im: unexpected shape {:?}", layout.shape());
        }
        let mut dst = vec![0f32; n * c * h * w];
        for ch in 0..c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ch * g.kh + ky) * g.kw + kx;
                    let col = &src[row * cols..(row + 1) * cols];
                    for_each_cell(&g, (n, h, w), (ho, wo), ch, ky, kx, c, |j, i| dst[i] += col[j]);
                }
            }
        }
        Ok((CpuStorage::F32(dst), Shape::from((n, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.geom))?))
    }
}

/// 2-D convolution of `x` (N, Cin, H, W) with `weight` (Cout, Cin, kh, kw).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: Geom) -> Result<Tensor> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin || (kh, kw) != (g.kh, g.kw) {
        candle_core::bail!("conv2d: weight {:?} does not fit input {:?}", weight.shape(), x.shape());
    }
    let (ho, wo) = g.out_hw(h, w)?;
    let cols = if g.is_pointwise() {
        x.transpose(0, 1)?.reshape((cin, n * h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let wmat = weight.reshape((cout, cin * kh * kw))?;
    let out = wmat.matmul(&cols)?.reshape((cout, n, ho, wo))?.transpose(0, 1)?;
    match bias {
        Some(b) => out.broadcast_add(&b.reshape((1, cout, 1, 1))?),
        None => out.contiguous(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Average with zero padding counted in the divisor.
    Avg,
}

struct Pool2d {
    kind: PoolKind,
    geom: Geom,
}

impl Pool2d {
    /// Visits every output cell with the flat indices of its in-bounds inputs.
    fn windows(&self, (n, c, h, w): (usize, usize, usize, usize), mut f: impl FnMut(usize, &[usize])) -> Result<()> {
        let g = &self.geom;
        let (ho, wo) = g.out_hw(h, w)?;
        let mut idx = Vec::with_capacity(g.kh * g.kw);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    idx.clear();
                    for ky in 0..g.kh {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                            if ix >= 0 && ix < w as isize {
                                idx.push(base + iy as usize * w + ix as usize);
                            }
                        }
                    }
                    f((plane * ho + oy) * wo + ox, &idx);
                }
            }
        }
        Ok(())
    }
}

impl CustomOp1 for Pool2d {
    fn name(&self) -> &'static str {
        "pool2d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let src = f32_slice(storage, layout)?;
        let (n, c, h, w) = dims4(layout)?;
        let (ho, wo) = self.geom.out_hw(h, w)?;
        let area = (self.geom.kh * self.geom.kw) as f32;
        let mut dst = vec![0f32; n * c * ho * wo];
        self.windows((n, c, h, w), |o, idx| {
            dst[o] = match self.kind {
                PoolKind::Max => idx.iter().map(|&i| src[i]).fold(f32::NEG_INFINITY, f32::max),
                PoolKind::Avg => idx.iter().map(|&i| src[i]).sum::<f32>() / area,
            };
        })?;
        Ok((CpuStorage::F32(dst), Shape::from((n, c, ho, wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let src = arg.flatten_all()?.to_vec1::<f32>()?;
        let g = grad.flatten_all()?.to_vec1::<f32>()?;
        let area = (self.geom.kh * self.geom.kw) as f32;
        let mut dx = vec![0f32; src.len()];
        self.windows(dims, |o, idx| match self.kind {
            PoolKind::Max => {
                // first maximum wins, matching the forward fold
                if let Some(&best) = idx.iter().reduce(|a, b| if src[*b] > src[*a] { b } else { a }) {
                    dx[best] += g[o];
                }
            }
            PoolKind::Avg => {
                for &i in idx {
                    dx[i] += g[o] / area;
                }
            }
        })?;
        Ok(Some(Tensor::from_vec(dx, arg.shape(), arg.device())?))
    }
}

pub fn max_pool2d(x: &Tensor, g: Geom) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Pool2d { kind: PoolKind::Max, geom: g })
}

pub fn avg_pool2d(x: &Tensor, g: Geom) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Pool2d { kind: PoolKind::Avg, geom: g })
}

/// Adaptive average pooling restricted to the cases the registry needs:
/// identity and global pooling.
pub fn adaptive_avg_pool2d(x: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == out {
        Ok(x.clone())
    } else if out == (1, 1) {
        x.mean_keepdim((2, 3))
    } else {
        candle_core::bail!("adaptive pooling from {h}x{w} to {out:?} is not supported")
    }
}
