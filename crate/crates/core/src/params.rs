//! Full parameter sets, their canonical flattening and key-value text form.

use crate::chain::{ChainParams, ChainParamsParametric, ChainParamsSaturated, MultiLogit};
use crate::config::ChainVariant;
use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Which model a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Latent-Markov chain, logit-in-s laws.
    M1Parametric,
    /// Latent-Markov chain, per-stratum tables.
    M1Saturated,
    /// Time-constant discrete random effects.
    M2,
}

impl ModelKind {
    pub fn model_name(self) -> &'static str {
        match self {
            ModelKind::M1Parametric | ModelKind::M1Saturated => "m1",
            ModelKind::M2 => "m2",
        }
    }

    pub fn variant(self) -> Option<ChainVariant> {
        match self {
            ModelKind::M1Parametric => Some(ChainVariant::Parametric),
            ModelKind::M1Saturated => Some(ChainVariant::Saturated),
            ModelKind::M2 => None,
        }
    }

    pub fn is_markov(self) -> bool {
        !matches!(self, ModelKind::M2)
    }
}

/// Fixed effects and state effects of the response model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionParams {
    /// Fixed-effect coefficients, length p1.
    pub beta: Vec<f64>,
    /// State effects u_1..u_J, each of length p2.
    pub u: Vec<Vec<f64>>,
}

impl EmissionParams {
    pub fn zeros(n_states: usize, p1: usize, p2: usize) -> Self {
        Self {
            beta: vec![0.0; p1],
            u: vec![vec![0.0; p2]; n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.u.len()
    }

    pub fn p1(&self) -> usize {
        self.beta.len()
    }

    pub fn p2(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }
}

/// The latent-structure block of a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentParams {
    /// M1: Markov chain laws.
    Markov(ChainParams),
    /// M2: one class logit in s, classes constant over time.
    TimeConstant(MultiLogit),
}

/// A complete parameter set θ for any of the supported models.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub emission: EmissionParams,
    pub latent: LatentParams,
}

impl ParameterSet {
    pub fn n_states(&self) -> usize {
        self.emission.n_states()
    }

    pub fn model_kind(&self) -> ModelKind {
        match &self.latent {
            LatentParams::Markov(ChainParams::Parametric(_)) => ModelKind::M1Parametric,
            LatentParams::Markov(ChainParams::Saturated(_)) => ModelKind::M1Saturated,
            LatentParams::TimeConstant(_) => ModelKind::M2,
        }
    }

    /// Flatten into `(names, values)` in the canonical order
    /// β, u_1..u_J, γ, then φ (or the saturated tables).
    pub fn flatten(&self) -> (Vec<String>, Vec<f64>) {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (d, b) in self.emission.beta.iter().enumerate() {
            names.push(format!("beta.{d}"));
            values.push(*b);
        }
        for (j, uj) in self.emission.u.iter().enumerate() {
            for (d, v) in uj.iter().enumerate() {
                names.push(format!("u.{}.{d}", j + 1));
                values.push(*v);
            }
        }
        match &self.latent {
            LatentParams::Markov(ChainParams::Parametric(chain)) => {
                flatten_logit(&chain.gamma, "gamma", &mut names, &mut values);
                for (k, row) in chain.phi.iter().enumerate() {
                    flatten_logit(row, &format!("phi.{}", k + 1), &mut names, &mut values);
                }
            }
            LatentParams::Markov(ChainParams::Saturated(chain)) => {
                for (t, pi) in chain.initial.iter().enumerate() {
                    for (j, p) in pi.iter().enumerate() {
                        names.push(format!("pi.{}.{}", t + 1, j + 1));
                        values.push(*p);
                    }
                }
                for (t, mat) in chain.transition.iter().enumerate() {
                    for (k, row) in mat.iter().enumerate() {
                        for (j, p) in row.iter().enumerate() {
                            names.push(format!("A.{}.{}.{}", t + 1, k + 1, j + 1));
                            values.push(*p);
                        }
                    }
                }
            }
            LatentParams::TimeConstant(gamma) => {
                flatten_logit(gamma, "gamma", &mut names, &mut values);
            }
        }
        (names, values)
    }

    /// Inverse of [`flatten`](Self::flatten): write `values` back in the
    /// canonical order. Shapes are taken from `self`.
    pub fn unflatten(&self, values: &[f64]) -> ParameterSet {
        let mut theta = self.clone();
        let mut it = values.iter().copied();
        let mut next = || it.next().expect("flat vector too short");
        for b in theta.emission.beta.iter_mut() {
            *b = next();
        }
        for uj in theta.emission.u.iter_mut() {
            for v in uj.iter_mut() {
                *v = next();
            }
        }
        match &mut theta.latent {
            LatentParams::Markov(ChainParams::Parametric(chain)) => {
                unflatten_logit(&mut chain.gamma, &mut next);
                for row in chain.phi.iter_mut() {
                    unflatten_logit(row, &mut next);
                }
            }
            LatentParams::Markov(ChainParams::Saturated(chain)) => {
                for pi in chain.initial.iter_mut() {
                    for p in pi.iter_mut() {
                        *p = next();
                    }
                }
                for mat in chain.transition.iter_mut() {
                    for row in mat.iter_mut() {
                        for p in row.iter_mut() {
                            *p = next();
                        }
                    }
                }
            }
            LatentParams::TimeConstant(gamma) => unflatten_logit(gamma, &mut next),
        }
        assert!(it.next().is_none(), "flat vector too long");
        theta
    }

    /// Relabel states: new state `j` takes the role of old state `perm[j]`.
    ///
    /// Parametric logits are re-referenced so that the new last category has
    /// a zero predictor; the likelihood is unchanged.
    pub fn permute_states(&self, perm: &[usize]) -> ParameterSet {
        let j_states = self.n_states();
        assert_eq!(perm.len(), j_states);
        let emission = EmissionParams {
            beta: self.emission.beta.clone(),
            u: perm.iter().map(|&o| self.emission.u[o].clone()).collect(),
        };
        let latent = match &self.latent {
            LatentParams::Markov(ChainParams::Parametric(chain)) => {
                LatentParams::Markov(ChainParams::Parametric(ChainParamsParametric {
                    gamma: permute_logit(&chain.gamma, perm),
                    phi: perm
                        .iter()
                        .map(|&k_old| permute_logit(&chain.phi[k_old], perm))
                        .collect(),
                }))
            }
            LatentParams::Markov(ChainParams::Saturated(chain)) => {
                LatentParams::Markov(ChainParams::Saturated(ChainParamsSaturated {
                    initial: chain
                        .initial
                        .iter()
                        .map(|pi| perm.iter().map(|&o| pi[o]).collect())
                        .collect(),
                    transition: chain
                        .transition
                        .iter()
                        .map(|mat| {
                            perm.iter()
                                .map(|&k_old| perm.iter().map(|&o| mat[k_old][o]).collect())
                                .collect()
                        })
                        .collect(),
                }))
            }
            LatentParams::TimeConstant(gamma) => LatentParams::TimeConstant(permute_logit(gamma, perm)),
        };
        ParameterSet { emission, latent }
    }

    /// The permutation that orders states by ascending first state-effect
    /// component (ties broken by the original index).
    pub fn intercept_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_states()).collect();
        order.sort_by(|&a, &b| {
            let ua = self.emission.u[a].first().copied().unwrap_or(0.0);
            let ub = self.emission.u[b].first().copied().unwrap_or(0.0);
            ua.partial_cmp(&ub).unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    }

    /// Serialize to key-value text. `extra` rows (metadata such as loglik or
    /// convergence flags) are prepended after the structural header.
    pub fn to_kv(&self, extra: &[(&str, String)]) -> KvFile {
        let kind = self.model_kind();
        let mut kv = KvFile::new();
        kv.push("model", kind.model_name());
        if let Some(v) = kind.variant() {
            kv.push("variant", v.as_str());
        }
        kv.push("n_states", self.n_states());
        kv.push("p1", self.emission.p1());
        kv.push("p2", self.emission.p2());
        if let LatentParams::Markov(ChainParams::Saturated(chain)) = &self.latent {
            kv.push("horizon", chain.horizon());
        }
        for (k, v) in extra {
            kv.push(*k, v);
        }
        let (names, values) = self.flatten();
        for (name, value) in names.iter().zip(&values) {
            kv.push(name.clone(), *value);
        }
        kv
    }

    /// Parse a parameter file produced by [`to_kv`](Self::to_kv).
    pub fn from_kv(kv: &KvFile) -> Result<ParameterSet> {
        let model = kv
            .get("model")
            .ok_or_else(|| Error::InvalidConfig("parameter file: missing `model`".into()))?;
        let n_states: usize = kv
            .get_parsed("n_states")?
            .ok_or_else(|| Error::InvalidConfig("parameter file: missing `n_states`".into()))?;
        let p1: usize = kv
            .get_parsed("p1")?
            .ok_or_else(|| Error::InvalidConfig("parameter file: missing `p1`".into()))?;
        let p2: usize = kv
            .get_parsed("p2")?
            .ok_or_else(|| Error::InvalidConfig("parameter file: missing `p2`".into()))?;
        let kind = match (model, kv.get("variant")) {
            ("m2", _) => ModelKind::M2,
            ("m1", Some("saturated")) => ModelKind::M1Saturated,
            ("m1", _) => ModelKind::M1Parametric,
            (other, _) => {
                return Err(Error::InvalidConfig(format!(
                    "parameter file: unknown model `{other}`"
                )))
            }
        };
        let latent = match kind {
            ModelKind::M1Parametric => LatentParams::Markov(ChainParams::Parametric(
                ChainParamsParametric::uniform(n_states),
            )),
            ModelKind::M1Saturated => {
                let horizon: usize = kv.get_parsed("horizon")?.ok_or_else(|| {
                    Error::InvalidConfig("parameter file: saturated variant needs `horizon`".into())
                })?;
                LatentParams::Markov(ChainParams::Saturated(ChainParamsSaturated::uniform(
                    n_states, horizon,
                )))
            }
            ModelKind::M2 => LatentParams::TimeConstant(MultiLogit::zeros(n_states)),
        };
        let template = ParameterSet {
            emission: EmissionParams::zeros(n_states, p1, p2),
            latent,
        };
        let (names, mut values) = template.flatten();
        for (name, slot) in names.iter().zip(values.iter_mut()) {
            *slot = kv
                .get_parsed::<f64>(name)?
                .ok_or_else(|| Error::InvalidConfig(format!("parameter file: missing `{name}`")))?;
        }
        Ok(template.unflatten(&values))
    }
}

fn flatten_logit(logit: &MultiLogit, prefix: &str, names: &mut Vec<String>, values: &mut Vec<f64>) {
    for (j, c) in logit.coef.iter().enumerate() {
        names.push(format!("{prefix}.{}.0", j + 1));
        values.push(c[0]);
        names.push(format!("{prefix}.{}.1", j + 1));
        values.push(c[1]);
    }
}

fn unflatten_logit(logit: &mut MultiLogit, next: &mut impl FnMut() -> f64) {
    for c in logit.coef.iter_mut() {
        c[0] = next();
        c[1] = next();
    }
}

/// Relabeled multinomial logit: new category j gets the old predictor of
/// `perm[j]` minus the old predictor of the new reference `perm[J-1]`.
fn permute_logit(logit: &MultiLogit, perm: &[usize]) -> MultiLogit {
    let j_states = logit.n_states();
    let old_coef = |j: usize| -> [f64; 2] {
        if j + 1 == j_states {
            [0.0, 0.0]
        } else {
            logit.coef[j]
        }
    };
    let reference = old_coef(perm[j_states - 1]);
    let coef = perm[..j_states - 1]
        .iter()
        .map(|&o| {
            let c = old_coef(o);
            [c[0] - reference[0], c[1] - reference[1]]
        })
        .collect();
    MultiLogit { coef }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_m1() -> ParameterSet {
        ParameterSet {
            emission: EmissionParams {
                beta: vec![0.5],
                u: vec![vec![1.0], vec![-1.5]],
            },
            latent: LatentParams::Markov(ChainParams::Parametric(ChainParamsParametric {
                gamma: MultiLogit {
                    coef: vec![[2.0, -0.5]],
                },
                phi: vec![
                    MultiLogit {
                        coef: vec![[5.0, -1.5]],
                    },
                    MultiLogit {
                        coef: vec![[5.0, -0.75]],
                    },
                ],
            })),
        }
    }

    #[test]
    fn flatten_round_trips() {
        let theta = example_m1();
        let (names, values) = theta.flatten();
        assert_eq!(names.len(), 9); // 1 + 2 + 2 + 4
        assert_eq!(names[0], "beta.0");
        assert_eq!(names[3], "gamma.1.0");
        assert_eq!(names[5], "phi.1.1.0");
        let again = theta.unflatten(&values);
        assert_eq!(theta, again);
    }

    #[test]
    fn kv_round_trips() {
        let theta = example_m1();
        let kv = theta.to_kv(&[("loglik", "-12.5".to_string())]);
        let again = ParameterSet::from_kv(&kv).unwrap();
        assert_eq!(theta, again);
        assert_eq!(kv.get("loglik"), Some("-12.5"));
    }

    #[test]
    fn permutation_preserves_law_probabilities() {
        let theta = example_m1();
        let permuted = theta.permute_states(&[1, 0]);
        let (LatentParams::Markov(old), LatentParams::Markov(new)) =
            (&theta.latent, &permuted.latent)
        else {
            unreachable!()
        };
        for s in 1..=10 {
            let a = old.chain_laws(s).unwrap();
            let b = new.chain_laws(s).unwrap();
            for j in 0..2 {
                assert!((a.initial[j] - b.initial[1 - j]).abs() < 1e-12);
                for k in 0..2 {
                    assert!((a.transition[k][j] - b.transition[1 - k][1 - j]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(permuted.emission.u, vec![vec![-1.5], vec![1.0]]);
    }

    #[test]
    fn intercept_order_sorts_ascending() {
        let theta = example_m1();
        assert_eq!(theta.intercept_order(), vec![1, 0]);
        let sorted = theta.permute_states(&theta.intercept_order());
        assert_eq!(sorted.intercept_order(), vec![0, 1]);
    }
}
