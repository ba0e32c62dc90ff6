use super::ops::broadcast_shape;
use super::{Op, Tape, Var};
use crate::error::{Error, Result};

pub(super) fn run<'t>(
    tape: &'t Tape,
    roots: &[Var<'t>],
    seeds: &[Var<'t>],
    wrt: &[Var<'t>],
    create_graph: bool,
) -> Result<Vec<Var<'t>>> {
    if tape.consumed.get() {
        return Err(Error::TapeConsumed);
    }
    if roots.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} roots but {} seeds",
            roots.len(),
            seeds.len()
        )));
    }
    for (r, s) in roots.iter().zip(seeds) {
        let (rs, ss) = (r.shape(), s.shape());
        if rs != ss {
            return Err(Error::shape("backward seed", &rs, &ss));
        }
    }
    let start_len = tape.len();
    let n = roots.iter().map(|r| r.id + 1).max().unwrap_or(0);

    // Only nodes downstream of some `wrt` and upstream of some root carry
    // cotangents; everything else is skipped.
    let mut downstream = vec![false; n];
    for w in wrt {
        if w.id < n {
            downstream[w.id] = true;
        }
    }
    {
        let nodes = tape.nodes.borrow();
        let first = wrt.iter().map(|w| w.id).min().unwrap_or(n);
        for i in first..n {
            if !downstream[i] {
                let mut any = false;
                nodes[i].op.for_each_parent(|p| any |= downstream[p]);
                downstream[i] = any;
            }
        }
    }
    let mut upstream = vec![false; n];
    for r in roots {
        upstream[r.id] = true;
    }
    {
        let nodes = tape.nodes.borrow();
        for i in (0..n).rev() {
            if upstream[i] && downstream[i] {
                nodes[i].op.for_each_parent(|p| {
                    if downstream[p] {
                        upstream[p] = true;
                    }
                });
            }
        }
    }
    let live = |i: usize| i < n && upstream[i] && downstream[i];

    let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
    for (r, s) in roots.iter().zip(seeds) {
        if live(r.id) {
            accumulate(&mut grads, r.id, *s)?;
        }
    }

    for i in (0..n).rev() {
        if !live(i) {
            continue;
        }
        let Some(g) = grads[i] else { continue };
        let op = tape.op_of(i);
        if matches!(op, Op::Leaf) {
            continue;
        }
        for (p, contrib) in node_vjp(tape, i, &op, g, &live)? {
            accumulate(&mut grads, p, contrib)?;
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for w in wrt {
        let g = match grads.get(w.id).copied().flatten() {
            Some(g) => g,
            None => tape.zeros(&w.shape()),
        };
        out.push(g);
    }

    if create_graph {
        return Ok(out);
    }
    let values: Vec<_> = out.iter().map(|g| (*g.value()).clone()).collect();
    tape.nodes.borrow_mut().truncate(start_len);
    tape.consumed.set(true);
    Ok(values.into_iter().map(|v| tape.constant(v)).collect())
}

fn accumulate<'t>(grads: &mut [Option<Var<'t>>], id: usize, g: Var<'t>) -> Result<()> {
    grads[id] = Some(match grads[id] {
        Some(prev) => prev.add(g)?,
        None => g,
    });
    Ok(())
}

/// Reduces a broadcast cotangent back to the parent's shape.
fn unbroadcast<'t>(g: Var<'t>, parent: &Var<'t>) -> Result<Var<'t>> {
    let ps = parent.shape();
    if g.shape() == ps {
        Ok(g)
    } else {
        debug_assert!(broadcast_shape(&g.shape(), &ps).is_some());
        g.sum_to(&ps)
    }
}

/// Cotangent contributions of node `id` (with cotangent `g`) to its live
/// parents, built from differentiable ops.
fn node_vjp<'t>(
    tape: &'t Tape,
    id: usize,
    op: &Op,
    g: Var<'t>,
    live: &dyn Fn(usize) -> bool,
) -> Result<Vec<(usize, Var<'t>)>> {
    let mut any_live = false;
    op.for_each_parent(|p| any_live |= live(p));
    if !any_live {
        // e.g. a `wrt` node whose own inputs are irrelevant
        return Ok(Vec::new());
    }
    let v = |i: usize| tape.var(i);
    let out = v(id);
    let mut res = Vec::with_capacity(2);
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if live(a) {
                res.push((a, unbroadcast(g, &v(a))?));
            }
            if live(b) {
                res.push((b, unbroadcast(g, &v(b))?));
            }
        }
        Op::Sub(a, b) => {
            if live(a) {
                res.push((a, unbroadcast(g, &v(a))?));
            }
            if live(b) {
                res.push((b, unbroadcast(g.neg(), &v(b))?));
            }
        }
        Op::Mul(a, b) => {
            if live(a) {
                res.push((a, unbroadcast(g.mul(v(b))?, &v(a))?));
            }
            if live(b) {
                res.push((b, unbroadcast(g.mul(v(a))?, &v(b))?));
            }
        }
        Op::Div(a, b) => {
            if live(a) {
                res.push((a, unbroadcast(g.div(v(b))?, &v(a))?));
            }
            if live(b) {
                // d(a/b)/db = -(a/b)/b
                let gb = g.mul(out)?.div(v(b))?.neg();
                res.push((b, unbroadcast(gb, &v(b))?));
            }
        }
        Op::Neg(a) => res.push((a, g.neg())),
        Op::Scale(a, c) => res.push((a, g.scale(c))),
        Op::Offset(a) => res.push((a, g)),
        Op::MatMul(a, b) => {
            if live(a) {
                res.push((a, g.matmul(v(b).t()?)?));
            }
            if live(b) {
                res.push((b, v(a).t()?.matmul(g)?));
            }
        }
        Op::Transpose(a) => res.push((a, g.t()?)),
        Op::SumAll(a) | Op::SumAxis(a) | Op::SumTo(a) => {
            res.push((a, g.broadcast_to(&v(a).shape())?));
        }
        Op::BroadcastTo(a) => res.push((a, g.sum_to(&v(a).shape())?)),
        Op::Square(a) => res.push((a, g.mul(v(a))?.scale(2.0))),
        Op::Powi(a, n) => match n {
            0 => {}
            1 => res.push((a, g)),
            _ => res.push((a, g.mul(v(a).powi(n - 1))?.scale(n as f64))),
        },
        Op::Sqrt(a) => res.push((a, g.div(out)?.scale(0.5))),
        Op::Exp(a) => res.push((a, g.mul(out)?)),
        Op::Log(a) => res.push((a, g.div(v(a))?)),
        Op::Tanh(a) => {
            let d = out.square().neg().add_scalar(1.0);
            res.push((a, g.mul(d)?));
        }
        Op::Sigmoid(a) => {
            let d = out.mul(out.neg().add_scalar(1.0))?;
            res.push((a, g.mul(d)?));
        }
        Op::Softplus(a) => res.push((a, g.mul(v(a).sigmoid())?)),
        Op::Masked(a, mask) => res.push((a, g.mul(v(mask))?)),
        Op::SliceCols(a, start) => {
            let width = v(a).shape()[1];
            res.push((a, g.pad_cols(start, width)?));
        }
        Op::PadCols(a, start) => {
            let cols = v(a).shape()[1];
            res.push((a, g.slice_cols(start, start + cols)?));
        }
        Op::ConcatCols(ref parts) => {
            let mut col = 0;
            for &p in parts {
                let w = v(p).shape()[1];
                if live(p) {
                    res.push((p, g.slice_cols(col, col + w)?));
                }
                col += w;
            }
        }
    }
    Ok(res)
}
