use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

pub fn relu<T: Real>(tape: &mut Tape<T>, input: Var) -> Result<Var> {
    if !tape.owns(input) {
        return Err(Error::ForeignVar);
    }
    let out = tape
        .value(input)
        .map(|v| if v > T::zero() { v } else { T::zero() });
    tape.record(
        "relu",
        &[input],
        out,
        Box::new(|ctx| {
            let d = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.output.data())
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(Tensor::from_raw(ctx.output.shape(), d))]
        }),
    )
}

/// Channel concatenation; `a`'s channels come first.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if !tape.owns(a) || !tape.owns(b) {
        return Err(Error::ForeignVar);
    }
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            expected: format!("{}xCx{}x{}", sa.n, sa.h, sa.w),
            got: sb.to_string(),
        });
    }
    let plane = sa.plane();
    let (ca, cb) = (sa.c * plane, sb.c * plane);
    let (xa, xb) = (tape.value(a).data(), tape.value(b).data());
    let mut out = Vec::with_capacity((ca + cb) * sa.n);
    for n in 0..sa.n {
        out.extend_from_slice(&xa[n * ca..(n + 1) * ca]);
        out.extend_from_slice(&xb[n * cb..(n + 1) * cb]);
    }
    let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    tape.record(
        "concat_channels",
        &[a, b],
        Tensor::from_raw(shape, out),
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut da = Vec::with_capacity(ca * sa.n);
            let mut db = Vec::with_capacity(cb * sa.n);
            for chunk in g.chunks(ca + cb) {
                da.extend_from_slice(&chunk[..ca]);
                db.extend_from_slice(&chunk[ca..]);
            }
            vec![Some(Tensor::from_raw(sa, da)), Some(Tensor::from_raw(sb, db))]
        }),
    )
}
