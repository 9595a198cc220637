//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{Graph, ParamStore, Tensor, Var};

/// `|fd - ad| / max(|fd|, |ad|, 1e-6)`.
pub fn relative_error(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6)
}

/// Compares the gradient of `f` at `x` with central differences of step `h`
/// over every coordinate and returns the largest relative error.
pub fn fd_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t.clone(), false)?;
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true)?;
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let zeros = vec![0.0; x.numel()];
    let ad = grads.get(xv).unwrap_or(&zeros);
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error((up - down) / (2.0 * h), ad[i]));
    }
    Ok(worst)
}

/// Outcome of a parameter-space gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub checked: Vec<(String, usize, f64, f64)>,
}

/// Finite-difference check of `f` with respect to parameters of `store`.
///
/// With `samples == 0` every coordinate is checked; otherwise `samples`
/// coordinates are drawn (deterministically from `seed`) across all parameters.
pub fn fd_check_params<F>(store: &ParamStore<f64>, f: F, h: f64, samples: usize, seed: u64) -> Result<ParamCheck>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut base = store.clone();
    base.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &base)?;
    let grads = g.backward(loss)?;
    grads.accumulate(&g, &mut base);

    let mut coords: Vec<(usize, usize)> = Vec::new();
    let sizes: Vec<usize> = base.iter().map(|(_, p)| p.value.numel()).collect();
    if samples == 0 {
        for (pi, &n) in sizes.iter().enumerate() {
            coords.extend((0..n).map(|c| (pi, c)));
        }
    } else {
        let total: usize = sizes.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let mut flat = rng.random_range(0..total);
            let mut pi = 0;
            while flat >= sizes[pi] {
                flat -= sizes[pi];
                pi += 1;
            }
            coords.push((pi, flat));
        }
    }

    let mut out = ParamCheck {
        max_rel_error: 0.0,
        checked: Vec::with_capacity(coords.len()),
    };
    let mut probe = base.clone();
    for (pi, c) in coords {
        let id = probe.ids().nth(pi).expect("param index");
        let ad = base.get(id).grad.as_ref().map_or(0.0, |g| g.data()[c]);
        let orig = probe.get(id).value.data()[c];
        let mut eval = |v: f64| -> Result<f64> {
            probe.get_mut(id).value.data_mut()[c] = v;
            let mut g = Graph::new();
            let l = f(&mut g, &probe)?;
            Ok(g.value(l).data()[0])
        };
        let up = eval(orig + h)?;
        let down = eval(orig - h)?;
        probe.get_mut(id).value.data_mut()[c] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = relative_error(fd, ad);
        out.max_rel_error = out.max_rel_error.max(err);
        out.checked.push((base.name(id).to_string(), c, fd, ad));
    }
    Ok(out)
}
