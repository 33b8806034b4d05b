use crate::autodiff::{OpKind, Tape, Var};
use crate::tensor::{Float, Tensor};

pub fn relu<T: Float>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = tape.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
    tape.push(OpKind::Relu, out, &[x], |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>| {
        let mut dx = g.clone();
        // derivative at exactly zero is zero
        for (d, &v) in dx.data_mut().iter_mut().zip(ins[0].data()) {
            if v <= T::zero() {
                *d = T::zero();
            }
        }
        vec![Some(dx)]
    })
}

/// Logistic function, kept strictly inside (0, 1) even where the exact value
/// rounds to an endpoint.
pub fn sigmoid_scalar<T: Float>(v: T) -> T {
    let one = T::one();
    let s = if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Float>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = tape.value(x).map(sigmoid_scalar);
    tape.push(OpKind::Sigmoid, out, &[x], |g: &Tensor<T>, _: &[&Tensor<T>], y: &Tensor<T>| {
        let mut dx = g.clone();
        for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
            *d *= s * (T::one() - s);
            // saturated outputs otherwise feed subnormals into every GEMM below
            if d.is_subnormal() {
                *d = T::zero();
            }
        }
        vec![Some(dx)]
    })
}
