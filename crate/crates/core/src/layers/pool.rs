use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// 2x2 max pooling with stride 2.
///
/// Returns the pooled variable and, per output cell, the flat input index
/// that won. Ties go to the lowest flat index.
pub fn max_pool2d<T: Real>(tape: &mut Tape<T>, input: Var) -> Result<(Var, Vec<usize>)> {
    if !tape.owns(input) {
        return Err(Error::ForeignVar);
    }
    let s = tape.shape(input);
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::OddPoolInput { h: s.h, w: s.w });
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let x = tape.value(input).data();

    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for nc in 0..s.n * s.c {
        let base = nc * s.h * s.w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * s.w + 2 * j;
                let mut best = top;
                for idx in [top + 1, top + s.w, top + s.w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let winners = argmax.clone();
    let var = tape.record(
        "max_pool2d",
        &[input],
        Tensor::from_raw(out_shape, out),
        Box::new(move |ctx| {
            let mut dx = vec![T::zero(); ctx.inputs[0].len()];
            for (&idx, &g) in winners.iter().zip(ctx.grad.data()) {
                dx[idx] += g;
            }
            vec![Some(Tensor::from_raw(ctx.inputs[0].shape(), dx))]
        }),
    )?;
    Ok((var, argmax))
}
