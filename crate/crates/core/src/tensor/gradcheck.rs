use super::{Graph, ParamId, ParamStore, Result, TensorError, Var};

/// Compares tape adjoints with central differences for every coordinate of
/// every parameter `f` touches. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    Ok(grad_check_by_param(store, h, f)?
        .into_iter()
        .map(|(_, e)| e)
        .fold(0.0, f64::max))
}

/// Same as [`grad_check`], broken down per parameter name.
pub fn grad_check_by_param<F>(store: &mut ParamStore, h: f64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Argument(format!("step must be positive, got {h}")));
    }
    let (analytic, touched) = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        (grads, g.bound_params())
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.scalar(loss)
    };

    let mut report = Vec::new();
    for id in touched {
        let name = store.name(id).unwrap_or("?").to_string();
        let worst = check_param(store, id, h, analytic.get(id).unwrap_or(&[]), &eval)?;
        report.push((name, worst));
    }
    Ok(report)
}

fn check_param<E>(store: &mut ParamStore, id: ParamId, h: f64, analytic: &[f64], eval: &E) -> Result<f64>
where
    E: Fn(&ParamStore) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    for k in 0..store.get(id).len() {
        let orig = store.get(id).data()[k];
        store.get_mut(id).data_mut()[k] = orig + h;
        let plus = eval(store)?;
        store.get_mut(id).data_mut()[k] = orig - h;
        let minus = eval(store)?;
        store.get_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get(k).copied().unwrap_or(0.0);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
