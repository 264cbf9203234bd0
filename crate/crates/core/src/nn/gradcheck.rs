use rand::seq::index::sample;
use rand::Rng;

use super::params::{Graph, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{relative_error, Tensor, Var};

/// Central-difference check of `d loss / d x` where the loss also reads
/// parameters from `params`.
pub fn input_gradcheck<F>(params: &ParamStore, f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new(params);
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Central-difference check of `d loss / d param` for each of `ids`. When
/// `max_entries` is set, a seeded random subset of each tensor is probed.
/// Frozen parameters report their analytic gradient as zero.
pub fn param_gradcheck<F, R>(
    params: &ParamStore,
    ids: &[ParamId],
    loss: F,
    h: f64,
    max_entries: Option<usize>,
    rng: &mut R,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph) -> Result<Var>,
    R: Rng,
{
    let mut g = Graph::new(params);
    let l = loss(&mut g)?;
    g.backward(l)?;
    let mut out = Vec::with_capacity(ids.len());
    let mut probe = params.clone();
    for &id in ids {
        let n = params.get(id).numel();
        let analytic = g.param_grad(id).cloned();
        let entries: Vec<usize> = match max_entries {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &entries {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval_loss(&probe, &loss)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval_loss(&probe, &loss)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        out.push(ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: worst,
            entries: entries.len(),
        });
    }
    Ok(out)
}

fn eval_loss<F>(params: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let l = loss(&mut g)?;
    Ok(g.value(l).item())
}
