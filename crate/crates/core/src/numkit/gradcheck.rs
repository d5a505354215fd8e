//! Central finite-difference comparison against [`Graph::backward`].

use super::{Graph, NodeId, NumError, ParamTape};

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences of step `h`, over every entry of every parameter on the tape.
pub fn check_gradients<F>(tape: &mut ParamTape, h: f64, floor: f64, f: F) -> Result<GradCheck, NumError>
where
    F: Fn(&mut Graph, &ParamTape) -> Result<NodeId, NumError>,
{
    tape.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, tape)?;
    g.backward(loss, tape)?;
    drop(g);
    compare_with_finite_differences(
        tape,
        |t| t,
        |t| {
            let mut g = Graph::new();
            let loss = f(&mut g, t)?;
            Ok(g.scalar(loss))
        },
        h,
        floor,
    )
}

/// Like [`check_gradients`] for any state that owns a tape whose gradient
/// buffers already hold the analytic gradient of `loss`.
pub fn compare_with_finite_differences<S, E>(
    state: &mut S,
    tape: impl Fn(&mut S) -> &mut ParamTape,
    loss: impl Fn(&S) -> Result<f64, E>,
    h: f64,
    floor: f64,
) -> Result<GradCheck, E> {
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = tape(state).ids().collect();
    for id in ids {
        for k in 0..tape(state).param(id).len() {
            let orig = tape(state).param(id).data()[k];
            tape(state).param_mut(id).data_mut()[k] = orig + h;
            let up = loss(state);
            tape(state).param_mut(id).data_mut()[k] = orig - h;
            let down = loss(state);
            tape(state).param_mut(id).data_mut()[k] = orig;
            let numeric = (up? - down?) / (2.0 * h);
            let t = tape(state);
            let err = relative_error(t.grad(id).data()[k], numeric, floor);
            out.checked += 1;
            if err > out.max_rel_err || out.worst.is_none() {
                out.max_rel_err = out.max_rel_err.max(err);
                out.worst = Some((t.name(id).to_string(), k));
            }
        }
    }
    Ok(out)
}
