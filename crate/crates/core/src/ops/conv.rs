use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that keeps the spatial size.
    Same,
    /// No padding; each dim shrinks by `k - 1`.
    None,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: Shape, weight: Shape, padding: Padding) -> Result<Self> {
        let (kh, kw) = (weight.h, weight.w);
        if ![1, 3].contains(&kh) || ![1, 3].contains(&kw) {
            return Err(shape_err!("kernel {kh}x{kw} unsupported; expected 1 or 3"));
        }
        if x.c != weight.c {
            return Err(shape_err!("input has {} channels, weight {} expects {}", x.c, weight, weight.c));
        }
        if x.n == 0 || x.h == 0 || x.w == 0 {
            return Err(shape_err!("input {x} has an empty dimension"));
        }
        let (pad_h, pad_w, oh, ow) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, x.h, x.w),
            Padding::None => {
                if x.h < kh || x.w < kw {
                    return Err(shape_err!("input {x} smaller than kernel {kh}x{kw}"));
                }
                (0, 0, x.h - kh + 1, x.w - kw + 1)
            }
        };
        Ok(Geometry { cin: x.c, kh, kw, pad_h, pad_w, h: x.h, w: x.w, oh, ow })
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Pointwise kernels without padding read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.oh == self.h && self.ow == self.w
    }

    /// Output columns `[lo, hi)` whose tap at kernel offset `k` lands inside
    /// an input of length `len`.
    fn valid(out: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (len + pad).saturating_sub(k).min(out);
        (lo, hi.max(lo))
    }

    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (y0, y1) = Self::valid(self.oh, ki, self.pad_h, self.h);
                for kj in 0..self.kw {
                    let (x0, x1) = Self::valid(self.ow, kj, self.pad_w, self.w);
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let dst = &mut cols[row..row + p];
                    dst.fill(T::zero());
                    for oy in y0..y1 {
                        let iy = oy + ki - self.pad_h;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let d = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let ix0 = x0 + kj - self.pad_w;
                        d[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    fn col2im<T: Float>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (y0, y1) = Self::valid(self.oh, ki, self.pad_h, self.h);
                for kj in 0..self.kw {
                    let (x0, x1) = Self::valid(self.ow, kj, self.pad_w, self.w);
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let src = &cols[row..row + p];
                    for oy in y0..y1 {
                        let iy = oy + ki - self.pad_h;
                        let ix0 = x0 + kj - self.pad_w;
                        let d = &mut plane[iy * self.w + ix0..iy * self.w + ix0 + (x1 - x0)];
                        let s = &src[oy * self.ow + x0..oy * self.ow + x1];
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with stride 1 plus an optional per-channel bias.
///
/// `weight` is laid out as (cout, cin, kh, kw); `bias` as a length-cout
/// vector.
pub fn conv2d<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    padding: Padding,
) -> Result<Var> {
    let xs = tape.value(x).shape();
    let ws = tape.value(weight).shape();
    let geo = Geometry::new(xs, ws, padding)?;
    let cout = ws.n;
    if let Some(b) = bias {
        let bs = tape.value(b).shape();
        if bs.numel() != cout {
            return Err(shape_err!("bias {bs} does not match {cout} output channels"));
        }
    }

    let out = {
        let xv = tape.value(x);
        let wv = tape.value(weight);
        let bv = bias.map(|b| tape.value(b).data());
        forward(&geo, xv, wv, bv)
    };

    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    let has_bias = bias.is_some();
    Ok(tape.push(OpKind::Conv2d, out, &inputs, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>| {
        let (dx, dw, db) = backward(&geo, g, ins[0], ins[1], has_bias);
        let mut grads = vec![Some(dx), Some(dw)];
        if has_bias {
            grads.push(db);
        }
        grads
    }))
}

fn forward<T: Float>(geo: &Geometry, x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>) -> Tensor<T> {
    let n = x.shape().n;
    let cout = w.shape().n;
    let (k, p) = (geo.rows(), geo.cols());
    let mut out = Tensor::zeros([n, cout, geo.oh, geo.ow]);
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let out_len = cout * p;
    for s in 0..n {
        let xs = x.sample(s);
        let src: &[T] = if geo.is_pointwise() {
            xs
        } else {
            geo.im2col(xs, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_exact_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(cout, k, p, T::one(), w.data(), (k, 1), src, (p, 1), beta, dst, (p, 1));
    }
    out
}

fn backward<T: Float>(
    geo: &Geometry,
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let n = x.shape().n;
    let cout = w.shape().n;
    let (k, p) = (geo.rows(), geo.cols());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = has_bias.then(|| Tensor::zeros(Shape::vector(cout)));
    let pointwise = geo.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = vec![T::zero(); k * p];
    let in_len = x.shape().c * x.shape().plane();
    let out_len = cout * p;

    for s in 0..n {
        let gs = &g.data()[s * out_len..(s + 1) * out_len];
        let src: &[T] = if pointwise {
            x.sample(s)
        } else {
            geo.im2col(x.sample(s), &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(cout, p, k, T::one(), gs, (p, 1), src, (1, p), T::one(), dw.data_mut(), (k, 1));
        // dcols = Wᵀ · dY
        let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
        if pointwise {
            T::gemm(k, cout, p, T::one(), w.data(), (1, k), gs, (p, 1), T::zero(), dxs, (p, 1));
        } else {
            T::gemm(k, cout, p, T::one(), w.data(), (1, k), gs, (p, 1), T::zero(), &mut dcols, (p, 1));
            geo.col2im(&dcols, dxs);
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in gs.chunks_exact(p).enumerate() {
                db.data_mut()[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    (dx, dw, db)
}
