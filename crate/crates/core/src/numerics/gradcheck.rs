//! Central finite-difference checks for graph-built functions (64-bit).

use rand::Rng as _;

use crate::error::Result;

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor in `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn rel_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }

    fn eval<'a, F>(&self, inputs: &[Tensor<f64>], f: &F) -> Result<f64>
    where
        F: Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    }

    /// Compares analytic and numeric gradients at `probes` random coordinates
    /// (all coordinates when `probes` is `None`).
    pub fn run<'a, F>(
        &self,
        inputs: &[Tensor<f64>],
        f: F,
        probes: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Vec<Probe>>
    where
        F: Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();

        let coords: Vec<(usize, usize)> = match probes {
            None => inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect(),
            Some(n) => {
                let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
                let total: usize = sizes.iter().sum();
                (0..n)
                    .map(|_| {
                        let mut k = rng.random_range(0..total);
                        let mut i = 0;
                        while k >= sizes[i] {
                            k -= sizes[i];
                            i += 1;
                        }
                        (i, k)
                    })
                    .collect()
            }
        };

        let mut out = Vec::with_capacity(coords.len());
        let mut work = inputs.to_vec();
        for (i, j) in coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + self.step;
            let plus = self.eval(&work, &f)?;
            work[i].data_mut()[j] = orig - self.step;
            let minus = self.eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * self.step);
            let a = analytic[i].data()[j];
            out.push(Probe {
                input: i,
                index: j,
                analytic: a,
                numeric,
                rel_error: self.rel_error(a, numeric),
            });
        }
        Ok(out)
    }
}

pub fn max_rel_error(probes: &[Probe]) -> f64 {
    probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
}
