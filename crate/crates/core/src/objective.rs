//! Global density penalty, magnitude reward and their composition with the
//! language-modeling loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Soft-mask mass per layer against the global target density `ρ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityAccounting {
    pub per_layer_l1: Vec<f64>,
    pub per_layer_count: Vec<usize>,
    pub total_count: usize,
    pub target_density: f64,
}

impl DensityAccounting {
    pub fn new(per_layer_l1: Vec<f64>, per_layer_count: Vec<usize>, target_density: f64) -> Result<Self> {
        if per_layer_l1.len() != per_layer_count.len() {
            return Err(Error::invalid("per-layer mass and count lists differ in length"));
        }
        for (&l1, &n) in per_layer_l1.iter().zip(&per_layer_count) {
            if !(0.0..=n as f64).contains(&l1) {
                return Err(Error::invalid(format!("layer mass {l1} outside [0, {n}]")));
            }
        }
        let total_count = per_layer_count.iter().sum();
        Ok(DensityAccounting {
            per_layer_l1,
            per_layer_count,
            total_count,
            target_density,
        })
    }

    /// Accounting for a set of soft masks.
    pub fn from_masks<T: Real>(masks: &[Tensor<T>], target_density: f64) -> Result<Self> {
        let l1 = masks
            .iter()
            .map(|m| m.data().iter().map(|x| x.to_f64().unwrap().abs()).sum())
            .collect();
        Self::new(l1, masks.iter().map(Tensor::numel).collect(), target_density)
    }

    /// `(1/N) Σ_i ‖M_i‖₁`.
    pub fn global_density(&self) -> Result<f64> {
        if self.total_count == 0 {
            return Err(Error::invalid("density of zero prunable entries"));
        }
        Ok(self.per_layer_l1.iter().sum::<f64>() / self.total_count as f64)
    }
}

/// `λ₁ · |(1/N) Σ_i ‖M_i‖₁ − ρ|`.
pub fn sparsity_loss(acct: &DensityAccounting, lambda1: f64) -> Result<f64> {
    if lambda1 < 0.0 {
        return Err(Error::invalid(format!("lambda1 must be non-negative, got {lambda1}")));
    }
    Ok(lambda1 * (acct.global_density()? - acct.target_density).abs())
}

/// Normalization of the magnitude reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightNorm {
    /// `−λ₂ Σ_i ‖W̃_i‖₁`.
    Sum,
    /// `−(λ₂/N) Σ_i ‖W̃_i‖₁`, so the reward per entry is on the same scale as
    /// the density penalty.
    #[default]
    Mean,
}

/// Magnitude reward over effective weights. Always `≤ 0`.
pub fn weight_loss<T: Real>(effective: &[Tensor<T>], lambda2: f64, norm: WeightNorm) -> Result<f64> {
    if lambda2 < 0.0 {
        return Err(Error::invalid(format!("lambda2 must be non-negative, got {lambda2}")));
    }
    let l1: f64 = effective
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_f64().unwrap().abs()))
        .sum();
    let n: usize = effective.iter().map(Tensor::numel).sum();
    Ok(match norm {
        WeightNorm::Sum => -lambda2 * l1,
        WeightNorm::Mean if n == 0 => 0.0,
        WeightNorm::Mean => -lambda2 * l1 / n as f64,
    })
}

/// The three terms of the objective and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm_loss: f64,
    pub sparsity_loss: f64,
    pub weight_loss: f64,
    pub total: f64,
}

pub fn total_loss(lm: f64, sparsity: f64, weight: f64) -> Result<LossBreakdown> {
    total_loss_at(lm, sparsity, weight, 0)
}

pub(crate) fn total_loss_at(lm: f64, sparsity: f64, weight: f64, step: usize) -> Result<LossBreakdown> {
    for (term, value) in [("lm", lm), ("sparsity", sparsity), ("weight", weight)] {
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value, step });
        }
    }
    Ok(LossBreakdown {
        lm_loss: lm,
        sparsity_loss: sparsity,
        weight_loss: weight,
        total: lm + sparsity + weight,
    })
}

/// Objective coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub lambda1: f64,
    pub lambda2: f64,
    pub density: f64,
    pub weight_norm: WeightNorm,
}

/// Graph nodes of an assembled objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub lm: Var,
    pub sparsity: Var,
    pub weight: Var,
    pub total: Var,
}

impl Objective {
    /// Records the density penalty over `masks`.
    pub fn sparsity_var<T: Real>(&self, g: &mut Graph<T>, masks: &[Var]) -> Result<Var> {
        let n: usize = masks.iter().map(|&m| g.value(m).numel()).sum();
        if n == 0 {
            return Err(Error::invalid("density of zero prunable entries"));
        }
        let mass = sum_all(g, masks)?;
        let mean = g.scale(mass, T::from_f64_lossy(1.0 / n as f64));
        let dev = g.add_scalar(mean, T::from_f64_lossy(-self.density));
        let dev = g.abs(dev);
        Ok(g.scale(dev, T::from_f64_lossy(self.lambda1)))
    }

    /// Records the magnitude reward over `effective` weights.
    pub fn weight_var<T: Real>(&self, g: &mut Graph<T>, effective: &[Var]) -> Result<Var> {
        let n: usize = effective.iter().map(|&w| g.value(w).numel()).sum();
        let abs: Vec<Var> = effective.iter().map(|&w| g.abs(w)).collect();
        let l1 = sum_all(g, &abs)?;
        let coef = match self.weight_norm {
            WeightNorm::Sum => -self.lambda2,
            WeightNorm::Mean => -self.lambda2 / n.max(1) as f64,
        };
        Ok(g.scale(l1, T::from_f64_lossy(coef)))
    }

    /// `lm + sparsity + weight` on the graph.
    pub fn assemble<T: Real>(&self, g: &mut Graph<T>, lm: Var, masks: &[Var], effective: &[Var]) -> Result<ObjectiveVars> {
        let sparsity = self.sparsity_var(g, masks)?;
        let weight = self.weight_var(g, effective)?;
        let total = g.add(lm, sparsity)?;
        let total = g.add(total, weight)?;
        Ok(ObjectiveVars {
            lm,
            sparsity,
            weight,
            total,
        })
    }
}

fn sum_all<T: Real>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &x in xs {
        let s = g.sum(x);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("sum over an empty list of tensors"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_multi, GradCheckOptions};
    use crate::mask::soft_mask_var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn acct(l1: &[f64], n: &[usize], rho: f64) -> DensityAccounting {
        DensityAccounting::new(l1.to_vec(), n.to_vec(), rho).unwrap()
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_loss(&acct(&[2.0], &[4], 0.5), 3.0).unwrap(), 0.0);
        let v = sparsity_loss(&acct(&[6.0], &[10], 0.5), 3.0).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        assert_eq!(sparsity_loss(&acct(&[4.0, 0.0], &[4, 4], 0.5), 3.0).unwrap(), 0.0);
        assert!(sparsity_loss(&acct(&[], &[], 0.5), 3.0).is_err());
        assert!(DensityAccounting::new(vec![5.0], vec![4], 0.5).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = Tensor::<f64>::new([2], vec![1.5, -0.5]).unwrap();
        assert_eq!(weight_loss(&[w.clone()], 10.0, WeightNorm::Sum).unwrap(), -20.0);
        assert_eq!(weight_loss(&[w.clone()], 10.0, WeightNorm::Mean).unwrap(), -10.0);
        let z = Tensor::<f64>::zeros([3]);
        assert_eq!(weight_loss(&[z], 10.0, WeightNorm::Sum).unwrap(), 0.0);
        assert_eq!(weight_loss(&[w], 0.0, WeightNorm::Sum).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let b = total_loss(2.0, 0.3, -20.0).unwrap();
        assert!((b.total - -17.7).abs() < 1e-12);
        assert_eq!(total_loss(1.25, 0.0, 0.0).unwrap().total, 1.25);
        match total_loss(1.0, f64::NAN, 0.0) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "sparsity"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(total_loss(f64::INFINITY, 0.0, 0.0), Err(Error::NonFinite { term: "lm", .. })));
    }

    #[test]
    fn scaling_weights_scales_only_the_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::from_fn([4, 5], |_| rng.gen_range(-1.0..1.0));
        let m = Tensor::<f64>::from_fn([4, 5], |_| rng.gen_range(0.0..1.0));
        let eff = |w: &Tensor<f64>| {
            Tensor::new([4, 5], w.data().iter().zip(m.data()).map(|(a, b)| a * b).collect()).unwrap()
        };
        let c = 3.7;
        let base = weight_loss(&[eff(&w)], 10.0, WeightNorm::Mean).unwrap();
        let scaled = weight_loss(&[eff(&w.map(|x| x * c))], 10.0, WeightNorm::Mean).unwrap();
        assert!((scaled - c * base).abs() < 1e-12);
        let a = DensityAccounting::from_masks(&[m.clone()], 0.5).unwrap();
        assert_eq!(sparsity_loss(&a, 3.0).unwrap(), sparsity_loss(&a, 3.0).unwrap());
    }

    #[test]
    fn redistributing_mass_keeps_penalty() {
        let a = sparsity_loss(&acct(&[3.0, 1.0, 2.0], &[4, 4, 4], 0.3), 3.0).unwrap();
        let b = sparsity_loss(&acct(&[0.5, 4.0, 1.5], &[4, 4, 4], 0.3), 3.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_is_lambda_over_n() {
        let obj = Objective {
            lambda1: 3.0,
            lambda2: 10.0,
            density: 0.5,
            weight_norm: WeightNorm::Mean,
        };
        for (fill, sign) in [(0.8, 1.0), (0.2, -1.0)] {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(Tensor::full([3, 4], fill).with_grad(true));
            let b = g.leaf(Tensor::full([5], fill).with_grad(true));
            let s = obj.sparsity_var(&mut g, &[a, b]).unwrap();
            let grads = g.backward(s).unwrap();
            for v in [a, b] {
                for &x in grads.get(v).unwrap() {
                    assert!((x - sign * 3.0 / 17.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn objective_gradient_is_sum_of_terms_and_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn([6, 5], |_| rng.gen_range(-1.0..1.0));
        let y = Tensor::<f64>::from_fn([6, 3], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f64>::from_fn([3, 5], |_| rng.gen_range(-1.0..1.0));
        let p = Tensor::<f64>::from_fn([3, 5], |_| rng.gen_range(-0.05..0.05));
        let obj = Objective {
            lambda1: 3.0,
            lambda2: 10.0,
            density: 0.3,
            weight_norm: WeightNorm::Mean,
        };
        let build = |g: &mut Graph<f64>, pv: Var, which: usize| -> crate::Result<Var> {
            let m = soft_mask_var(g, pv, 25.0, 4.0, None)?;
            let wv = g.constant(w.clone());
            let eff = g.mul(m, wv)?;
            let xv = g.constant(x.clone());
            let out = g.matmul_nt(xv, eff)?;
            let yv = g.constant(y.map(|v| -v));
            let diff = g.add(out, yv)?;
            let sq = g.mul(diff, diff)?;
            let lm = g.mean(sq)?;
            let vars = obj.assemble(g, lm, &[m], &[eff])?;
            Ok([vars.total, vars.lm, vars.sparsity, vars.weight][which])
        };
        let grad_of = |which: usize| {
            let mut g = Graph::new();
            let pv = g.leaf(p.clone().with_grad(true));
            let out = build(&mut g, pv, which).unwrap();
            g.backward(out).unwrap().get(pv).unwrap().to_vec()
        };
        let total = grad_of(0);
        let parts: Vec<Vec<f64>> = (1..4).map(grad_of).collect();
        for i in 0..total.len() {
            let s = parts[0][i] + parts[1][i] + parts[2][i];
            assert!((total[i] - s).abs() <= 1e-12 * total[i].abs().max(1.0));
        }
        let coords: Vec<_> = (0..15).map(|i| (0, i)).collect();
        let report = grad_check_multi(
            |g, v| build(g, v[0], 0),
            &[p.clone()],
            &coords,
            GradCheckOptions {
                tolerance: 1e-4,
                ..Default::default()
            },
        );
        assert!(report.passed, "{report:?}");
    }

}
