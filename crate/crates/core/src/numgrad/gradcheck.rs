use crate::error::Result;
use crate::numgrad::{Graph, NodeId, Rng};

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare analytic gradients of every unfrozen parameter against central
/// differences. Re-uses the feeds of the last forward pass; the graph is left
/// evaluated at the original parameter values.
pub fn check_gradients(graph: &mut Graph, loss: NodeId, tolerance: f64) -> Result<GradCheckReport> {
    check(graph, loss, tolerance, |len| (0..len).collect())
}

/// Like [`check_gradients`] but probes at most `per_param` elements of each
/// tensor: the largest-magnitude gradient entry plus a seeded random sample.
pub fn check_gradients_sampled(
    graph: &mut Graph,
    loss: NodeId,
    tolerance: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    graph.rerun()?;
    let grads = graph.backward(loss)?;
    let mut picks = grads.values().map(|g| {
        let len = g.len();
        if len <= per_param {
            return (0..len).collect::<Vec<_>>();
        }
        let argmax = (0..len).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap();
        let mut idx: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut idx);
        let mut chosen: Vec<usize> = std::iter::once(argmax).chain(idx.into_iter().filter(|&i| i != argmax)).take(per_param).collect();
        chosen.sort_unstable();
        chosen
    }).collect::<Vec<_>>().into_iter();
    check(graph, loss, tolerance, move |_| picks.next().unwrap())
}

fn check(
    graph: &mut Graph,
    loss: NodeId,
    tolerance: f64,
    mut select: impl FnMut(usize) -> Vec<usize>,
) -> Result<GradCheckReport> {
    graph.rerun()?;
    let analytic = graph.backward(loss)?;
    let mut params = Vec::with_capacity(analytic.len());
    for (name, grad) in &analytic {
        let original = graph.param_value(name).unwrap().clone();
        let mut worst = 0.0_f64;
        let mut probe = original.clone();
        for i in select(original.len()) {
            probe.data_mut()[i] = original.data()[i] + FD_STEP;
            graph.set_param(name, probe.clone())?;
            graph.rerun()?;
            let plus = graph.try_value(loss)?.item();
            probe.data_mut()[i] = original.data()[i] - FD_STEP;
            graph.set_param(name, probe.clone())?;
            graph.rerun()?;
            let minus = graph.try_value(loss)?.item();
            probe.data_mut()[i] = original.data()[i];
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        graph.set_param(name, original)?;
        params.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst,
            passed: worst <= tolerance,
        });
    }
    graph.rerun()?;
    Ok(GradCheckReport { tolerance, params })
}
