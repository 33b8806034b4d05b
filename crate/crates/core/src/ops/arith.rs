use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Float, Shape, Tensor};

fn same_shape<T: Float>(tape: &Tape<T>, a: Var, b: Var) -> Result<Shape> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(shape_err!("elementwise op on mismatched shapes {sa} and {sb}"));
    }
    Ok(sa)
}

/// `a + scale·b` with a fixed scale.
pub fn add_scaled<T: Float>(tape: &mut Tape<T>, a: Var, b: Var, scale: T) -> Result<Var> {
    same_shape(tape, a, b)?;
    let mut out = tape.value(a).clone();
    for (o, &v) in out.data_mut().iter_mut().zip(tape.value(b).data()) {
        *o += scale * v;
    }
    Ok(tape.push(OpKind::AddScaled, out, &[a, b], move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>| {
        vec![Some(g.clone()), Some(g.map(|v| v * scale))]
    }))
}

/// `a + scale·b` where `scale` is a recorded scalar and receives a gradient.
pub fn add_scaled_var<T: Float>(tape: &mut Tape<T>, a: Var, b: Var, scale: Var) -> Result<Var> {
    same_shape(tape, a, b)?;
    let sv = tape.value(scale);
    if sv.numel() != 1 {
        return Err(shape_err!("scale must be a scalar, got {}", sv.shape()));
    }
    let k = sv.data()[0];
    let mut out = tape.value(a).clone();
    for (o, &v) in out.data_mut().iter_mut().zip(tape.value(b).data()) {
        *o += k * v;
    }
    Ok(tape.push(OpKind::AddScaled, out, &[a, b, scale], |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>| {
        let k = ins[2].data()[0];
        let dk: T = g.data().iter().zip(ins[1].data()).map(|(&gv, &bv)| gv * bv).sum();
        vec![Some(g.clone()), Some(g.map(|v| v * k)), Some(Tensor::scalar(dk).reshape(ins[2].shape()).expect("scalar"))]
    }))
}

pub fn sum<T: Float>(tape: &mut Tape<T>, x: Var) -> Var {
    let xs = tape.value(x).shape();
    let out = Tensor::scalar(tape.value(x).sum());
    tape.push(OpKind::Sum, out, &[x], move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>| {
        vec![Some(Tensor::full(xs, g.data()[0]))]
    })
}

/// `Σ wᵢ·xᵢ` against a constant weight tensor; a scalar probe with a
/// non-uniform gradient.
pub fn weighted_sum<T: Float>(tape: &mut Tape<T>, x: Var, weights: Tensor<T>) -> Result<Var> {
    let xv = tape.value(x);
    if xv.shape() != weights.shape() {
        return Err(shape_err!("weights {} do not match input {}", weights.shape(), xv.shape()));
    }
    let total: T = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
    Ok(tape.push(OpKind::WeightedSum, Tensor::scalar(total), &[x], move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>| {
        let s = g.data()[0];
        vec![Some(weights.map(|w| w * s))]
    }))
}
