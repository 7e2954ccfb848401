//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use vqreg_core::rng::rng;

use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max relative error {:.3e} >= {tol:.1e} \
             (param `{}`[{}]: analytic {:.6e}, finite-diff {:.6e}; {} checks)",
            self.max_rel_err,
            self.worst_param,
            self.worst_index,
            self.worst_analytic,
            self.worst_fd,
            self.checked
        );
    }
}

/// Compare analytic parameter gradients against central finite differences.
///
/// `build` must construct the (scalar) loss as a deterministic, smooth
/// function of the leafed parameters: quantizers must run in frozen mode so
/// the straight-through surrogate is differentiable (the builder captures
/// assignments on the base run and replays them).
///
/// At most `max_checks_per_param` randomly chosen components are perturbed
/// per parameter (all of them when the parameter is smaller than that).
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    mut build: F,
    eps: f64,
    max_checks_per_param: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    // analytic gradients at the base point
    let mut g = Graph::new();
    let leaves = store.leaf_all(&mut g);
    let loss = build(&mut g, &leaves);
    g.backward(loss);
    let analytic = store.collect_grads(&g, &leaves);
    drop(g);

    let mut eval = |store: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let leaves = store.leaf_all(&mut g);
        let loss = build(&mut g, &leaves);
        g.value(loss)[0]
    };

    let mut r = rng(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
    };
    for pi in 0..store.len() {
        let len = store.entries()[pi].data.len();
        let indices: Vec<usize> = if len <= max_checks_per_param {
            (0..len).collect()
        } else {
            (0..max_checks_per_param).map(|_| r.gen_range(0..len)).collect()
        };
        for idx in indices {
            let id = crate::params::ParamId(pi);
            let orig = store.data(id)[idx];
            store.data_mut(id)[idx] = orig + eps;
            let up = eval(store);
            store.data_mut(id)[idx] = orig - eps;
            let down = eval(store);
            store.data_mut(id)[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[pi][idx];
            // components whose true gradient vanishes (e.g. a conv bias
            // feeding an instance norm) sit below the central-difference
            // noise floor; compare them absolutely instead of relatively
            let scale = an.abs().max(fd.abs());
            let rel = if scale < 1e-6 { 0.0 } else { (an - fd).abs() / scale };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.entries()[pi].name.clone();
                report.worst_index = idx;
                report.worst_analytic = an;
                report.worst_fd = fd;
            }
        }
    }
    report
}
