//! Hint, oracle and composite conditioning encoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::separator::Variant;
use crate::tensor::{Backend, Eval, Tensor};

/// Length of every conditioning embedding; equals the separator bottleneck width.
pub const EMBED_DIM: usize = 128;
pub const DEFAULT_CLASS_COUNT: usize = 41;

pub const HINT_PREFIX: &str = "cond.hint";
pub const ORACLE_PREFIX: &str = "cond.oracle";
pub const COMPOSITE_PREFIX: &str = "cond.composite";

/// Ordered, unique class labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::usage("class vocabulary is empty"));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::usage("class vocabulary labels must be unique"));
        }
        Ok(ClassVocabulary { names })
    }

    /// Generic labels `class-00`, `class-01`, ...
    pub fn numbered(n: usize) -> Self {
        ClassVocabulary {
            names: (0..n).map(|i| format!("class-{i:02}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Parses a comma-separated list of class indices and/or names.
    pub fn resolve(&self, list: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let idx = match item.parse::<usize>() {
                Ok(i) if i < self.len() => i,
                Ok(i) => {
                    return Err(Error::usage(format!(
                        "class index {i} out of range for {} classes",
                        self.len()
                    )))
                }
                Err(_) => self
                    .index_of(item)
                    .ok_or_else(|| Error::usage(format!("unknown class name `{item}`")))?,
            };
            if !out.contains(&idx) {
                out.push(idx);
            }
        }
        if out.is_empty() {
            return Err(Error::usage("empty class list"));
        }
        Ok(out)
    }
}

/// Binary indicator of length `n` with the listed positions set.
pub fn multi_hot(n: usize, indices: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &i in indices {
        v[i] = 1.0;
    }
    v
}

pub fn active_indices(hot: &[f64]) -> Vec<usize> {
    hot.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// One- or multi-hot indicator together with its embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    pub hot: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn check_hot(hot: &[f64], n_classes: usize) -> Result<()> {
    if hot.len() != n_classes {
        return Err(Error::dim(format!(
            "indicator has {} entries, vocabulary has {n_classes}",
            hot.len()
        )));
    }
    if hot.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::usage("indicator entries must be 0 or 1"));
    }
    if hot.iter().all(|&v| v == 0.0) {
        return Err(Error::usage("indicator has no class set"));
    }
    Ok(())
}

/// FC(n_classes → 128) + ReLU under the parameter prefix `prefix`.
pub fn encode_indicator<B: Backend>(b: &mut B, prefix: &str, hot: &[f64]) -> Result<B::Value> {
    let w = b.param(&format!("{prefix}.weight"))?;
    let n_classes = b.tensor(&w).shape()[1];
    check_hot(hot, n_classes)?;
    let bias = b.param(&format!("{prefix}.bias"))?;
    let x = b.constant(Tensor::from_vec(hot.to_vec()));
    let z = b.linear(&x, &w, &bias)?;
    Ok(b.relu(&z))
}

/// concat(c, o) → FC(256 → 128) + ReLU.
pub fn compose_embeddings<B: Backend>(b: &mut B, c: &B::Value, o: &B::Value) -> Result<B::Value> {
    for v in [c, o] {
        if b.tensor(v).shape() != [EMBED_DIM] {
            return Err(Error::dim(format!(
                "composite encoder expects {EMBED_DIM}-dim inputs, got {:?}",
                b.tensor(v).shape()
            )));
        }
    }
    let w = b.param(&format!("{COMPOSITE_PREFIX}.weight"))?;
    let bias = b.param(&format!("{COMPOSITE_PREFIX}.bias"))?;
    let joined = b.concat(&[c.clone(), o.clone()], 0)?;
    let z = b.linear(&joined, &w, &bias)?;
    Ok(b.relu(&z))
}

/// The embedding that modulates the separator for a given variant.
///
/// eCATSE requires the oracle indicator and routes hint and oracle embeddings
/// through the composite encoder; the other variants reject an oracle.
pub fn conditioning<B: Backend>(b: &mut B, variant: Variant, hint: &[f64], oracle: Option<&[f64]>) -> Result<B::Value> {
    let c = encode_indicator(b, HINT_PREFIX, hint)?;
    match (variant, oracle) {
        (Variant::Ecatse, Some(o)) => {
            let oe = encode_indicator(b, ORACLE_PREFIX, o)?;
            compose_embeddings(b, &c, &oe)
        }
        (Variant::Ecatse, None) => Err(Error::usage("ecatse needs an oracle context vector")),
        (_, Some(_)) => Err(Error::usage(format!("{variant} does not take an oracle context"))),
        (_, None) => Ok(c),
    }
}

pub fn encode_hint(hot: &[f64], params: &Params) -> Result<Vec<f64>> {
    let mut e = Eval::new(params);
    Ok(encode_indicator(&mut e, HINT_PREFIX, hot)?.data().to_vec())
}

pub fn encode_oracle(hot: &[f64], params: &Params) -> Result<Vec<f64>> {
    let mut e = Eval::new(params);
    Ok(encode_indicator(&mut e, ORACLE_PREFIX, hot)?.data().to_vec())
}

pub fn compose(c: &[f64], o_emb: &[f64], params: &Params) -> Result<Vec<f64>> {
    let mut e = Eval::new(params);
    let cv = e.constant(Tensor::from_vec(c.to_vec()));
    let ov = e.constant(Tensor::from_vec(o_emb.to_vec()));
    Ok(compose_embeddings(&mut e, &cv, &ov)?.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder_params(prefix: &str, n: usize, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let w: Vec<f64> = (0..EMBED_DIM * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.insert(format!("{prefix}.weight"), Tensor::new(vec![EMBED_DIM, n], w).unwrap());
        p.insert(format!("{prefix}.bias"), Tensor::from_vec(b));
        p
    }

    fn zero_params(prefix: &str, n: usize) -> Params {
        let mut p = Params::new();
        p.insert(format!("{prefix}.weight"), Tensor::zeros(&[EMBED_DIM, n]));
        p.insert(format!("{prefix}.bias"), Tensor::zeros(&[EMBED_DIM]));
        p
    }

    fn pre_activation(prefix: &str, hot: &[f64], p: &Params) -> Vec<f64> {
        let w = p.get(&format!("{prefix}.weight")).unwrap();
        let b = p.get(&format!("{prefix}.bias")).unwrap();
        crate::tensor::ops::fully_connected(&Tensor::from_vec(hot.to_vec()), w, b)
            .unwrap()
            .into_data()
    }

    #[test]
    fn encoders_share_contract() {
        for (prefix, enc) in [
            (HINT_PREFIX, encode_hint as fn(&[f64], &Params) -> Result<Vec<f64>>),
            (ORACLE_PREFIX, encode_oracle),
        ] {
            let n = 41;
            let zero = enc(&multi_hot(n, &[3]), &zero_params(prefix, n)).unwrap();
            assert!(zero.iter().all(|&v| v == 0.0));

            let p = encoder_params(prefix, n, 11);
            let out = enc(&multi_hot(n, &[1, 7, 30]), &p).unwrap();
            assert_eq!(out.len(), EMBED_DIM);
            assert!(out.iter().all(|&v| v >= 0.0));

            // disjoint multi-hot: logits add up, minus one copy of the bias
            let a = pre_activation(prefix, &multi_hot(n, &[2, 5]), &p);
            let b = pre_activation(prefix, &multi_hot(n, &[9]), &p);
            let ab = pre_activation(prefix, &multi_hot(n, &[2, 5, 9]), &p);
            let bias = p.get(&format!("{prefix}.bias")).unwrap().data();
            for i in 0..EMBED_DIM {
                assert!((ab[i] - (a[i] + b[i] - bias[i])).abs() < 1e-12);
            }

            assert!(matches!(enc(&vec![0.0; n], &p), Err(Error::Usage(_))));
            assert!(matches!(enc(&[1.0; 3], &p), Err(Error::Dimension(_))));
        }
    }

    #[test]
    fn embedding_length_independent_of_vocabulary() {
        for n in [1, 5, 41, 100] {
            let p = encoder_params(HINT_PREFIX, n, n as u64);
            assert_eq!(encode_hint(&multi_hot(n, &[0]), &p).unwrap().len(), EMBED_DIM);
        }
    }

    fn composite(asymmetric: bool) -> Params {
        let mut p = Params::new();
        let mut w = vec![0.0; EMBED_DIM * 2 * EMBED_DIM];
        if asymmetric {
            // only the hint half feeds the output
            for o in 0..EMBED_DIM {
                w[o * 2 * EMBED_DIM + o] = 1.0;
            }
        }
        p.insert(
            format!("{COMPOSITE_PREFIX}.weight"),
            Tensor::new(vec![EMBED_DIM, 2 * EMBED_DIM], w).unwrap(),
        );
        p.insert(format!("{COMPOSITE_PREFIX}.bias"), Tensor::zeros(&[EMBED_DIM]));
        p
    }

    #[test]
    fn compose_cases() {
        let c: Vec<f64> = (0..EMBED_DIM).map(|i| i as f64 * 0.01).collect();
        let o: Vec<f64> = (0..EMBED_DIM).map(|i| 1.0 - i as f64 * 0.005).collect();
        let zero = compose(&c, &o, &composite(false)).unwrap();
        assert_eq!(zero.len(), EMBED_DIM);
        assert!(zero.iter().all(|&v| v == 0.0));

        let p = composite(true);
        let co = compose(&c, &o, &p).unwrap();
        let oc = compose(&o, &c, &p).unwrap();
        assert_eq!(co, c);
        assert_ne!(co, oc);

        assert!(compose(&c[..10], &o, &p).is_err());
    }

    #[test]
    fn vocabulary_resolution() {
        let v = ClassVocabulary::new(vec!["bark".into(), "chime".into(), "gong".into()]).unwrap();
        assert_eq!(v.resolve("2, bark").unwrap(), vec![2, 0]);
        assert!(v.resolve("meow").is_err());
        assert!(v.resolve("3").is_err());
        assert!(v.resolve("").is_err());
        assert!(ClassVocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }
}
