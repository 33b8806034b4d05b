use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Replicates every cell into a 2×2 block.
pub fn upsample_nearest2x<T: Float>(tape: &mut Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let s = xv.shape();
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros([s.n, s.c, oh, ow]);
    {
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..s.n * s.c {
            for y in 0..s.h {
                let row = &src[(p * s.h + y) * s.w..(p * s.h + y + 1) * s.w];
                for dy in 0..2 {
                    let base = (p * oh + 2 * y + dy) * ow;
                    for (x, &v) in row.iter().enumerate() {
                        dst[base + 2 * x] = v;
                        dst[base + 2 * x + 1] = v;
                    }
                }
            }
        }
    }
    tape.push(OpKind::UpsampleNearest2x, out, &[x], move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>| {
        let mut dx = Tensor::zeros(s);
        let gd = g.data();
        for (i, v) in dx.data_mut().iter_mut().enumerate() {
            let x = i % s.w;
            let y = (i / s.w) % s.h;
            let p = i / s.plane();
            let base = (p * oh + 2 * y) * ow + 2 * x;
            *v = gd[base] + gd[base + 1] + gd[base + ow] + gd[base + ow + 1];
        }
        vec![Some(dx)]
    })
}

/// Stacks `a`'s channels followed by `b`'s.
pub fn concat_channels<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    let (sa, sb) = (av.shape(), bv.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(shape_err!("cannot concat {sa} with {sb}: batch/spatial mismatch"));
    }
    let plane = sa.plane();
    let (la, lb) = (sa.c * plane, sb.c * plane);
    let mut data = Vec::with_capacity(sa.numel() + sb.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&av.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&bv.data()[n * lb..(n + 1) * lb]);
    }
    let out = Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)?;
    let split = sa.c;
    Ok(tape.push(OpKind::ConcatChannels, out, &[a, b], move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>| {
        let c = g.shape().c;
        vec![g.slice_channels(0, split).ok(), g.slice_channels(split, c).ok()]
    }))
}
