//! A small reverse-mode automatic differentiation engine.

mod graph;
mod ops;
mod params;
mod tensor;


pub use graph::{Grads, Graph, Var};
pub use ops::{attention_probs, softmax_rows, LN_EPS};
pub use params::{cosine_restart_lr, AdamW, Container, ParamStore};
pub use tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name, flat index, analytic and numeric value of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, on up to `per_tensor` randomly chosen
/// entries of every parameter whose name passes `select`.
pub fn gradcheck(
    store: &mut ParamStore,
    select: impl Fn(&str) -> bool,
    per_tensor: usize,
    h: f64,
    floor: f64,
    seed: u64,
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward_scalar(out);
    drop(g);
    let eval = |store: &ParamStore| {
        let mut g = Graph::inference();
        let out = f(&mut g, store);
        g.value(out).data[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().filter(|n| select(n)).map(String::from).collect();
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.len());
        let analytic = grads.param(&name);
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = store.get(&name).expect("selected parameter").data[i];
            store.get_mut(&name).expect("selected parameter").data[i] = orig + h;
            let plus = eval(store);
            store.get_mut(&name).expect("selected parameter").data[i] = orig - h;
            let minus = eval(store);
            store.get_mut(&name).expect("selected parameter").data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |t| t.data[i]);
            let e = rel_err(a, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    report
}
