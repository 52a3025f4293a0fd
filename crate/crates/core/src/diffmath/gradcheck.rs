use rand::Rng;

use super::{Gradients, ParamId, ParamStore, Real};
use crate::error::{Error, Result};

/// Compare analytic gradients against central differences.
///
/// `f` evaluates the scalar objective and its analytic gradients for
/// the current parameter values. Returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)` over
/// `coords` (all scalars when `coords` is `None`).
pub fn finite_diff_check<T, F>(
    mut f: F,
    store: &mut ParamStore<T>,
    coords: Option<&[(ParamId, usize)]>,
    eps: f64,
) -> Result<f64>
where
    T: Real,
    F: FnMut(&ParamStore<T>) -> Result<(T, Gradients<T>)>,
{
    if eps <= 0.0 {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .iter()
                .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
                .collect();
            &all
        }
    };
    let (value, grads) = f(store)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {value}")));
    }
    let mut worst = 0.0f64;
    for &(id, i) in coords {
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i].as_f64());
        let original = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = T::lit(original.as_f64() + eps);
        let plus = f(store).map(|r| r.0);
        store.get_mut(id).data_mut()[i] = T::lit(original.as_f64() - eps);
        let minus = f(store).map(|r| r.0);
        store.get_mut(id).data_mut()[i] = original;
        let (plus, minus) = (plus?.as_f64(), minus?.as_f64());
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around {}[{i}]",
                store.name(id)
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Draw `n` distinct random scalar coordinates, optionally restricted to
/// parameters whose name starts with one of `prefixes`.
pub fn random_coords<T: Real>(
    store: &ParamStore<T>,
    n: usize,
    prefixes: &[&str],
    rng: &mut impl Rng,
) -> Vec<(ParamId, usize)> {
    let pool: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, name, _)| prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p)))
        .map(|(id, _, t)| (id, t.len()))
        .collect();
    let mut out = Vec::with_capacity(n);
    if pool.is_empty() {
        return out;
    }
    let mut guard = 0;
    while out.len() < n && guard < n * 100 {
        guard += 1;
        let (id, len) = pool[rng.gen_range(0..pool.len())];
        let c = (id, rng.gen_range(0..len));
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}
