//! Text dataset format and a synthetic click-log generator.
//!
//! ```text
//! #dims=100000
//! 1\t4,11,53
//! 0\t5,50,87
//! ```
//!
//! Keys are ascending decimal. Labels come from a planted logistic model so
//! that a trained model has something to find.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use thiserror::Error;

use crate::model::{Batch, Example, ParamKey};

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid generator settings: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Dataset {
    pub dims: u64,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut line = String::new();
        writeln!(w, "#dims={}", self.dims)?;
        for ex in &self.examples {
            line.clear();
            write!(line, "{}\t", ex.label).unwrap();
            for (i, k) in ex.features.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                write!(line, "{}", k.0).unwrap();
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, DatasetError> {
        let mut dims = None;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let err = |msg: String| DatasetError::Parse { line: lineno, msg };
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.strip_prefix("dims=") {
                    dims = Some(v.trim().parse::<u64>().map_err(|e| err(format!("bad dims: {e}")))?);
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (label, keys) = line.split_once('\t').ok_or_else(|| err("missing tab".into()))?;
            let label = match label {
                "0" => 0,
                "1" => 1,
                other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
            };
            let mut features = Vec::new();
            if !keys.is_empty() {
                for k in keys.split(',') {
                    let k = k.parse::<u64>().map_err(|e| err(format!("bad key {k:?}: {e}")))?;
                    if features.last().is_some_and(|&ParamKey(prev)| prev >= k) {
                        return Err(err("keys must be strictly ascending".into()));
                    }
                    features.push(ParamKey(k));
                }
            }
            examples.push(Example { label, features });
        }
        let dims = dims.ok_or(DatasetError::Parse { line: 1, msg: "missing #dims header".into() })?;
        if let Some(k) = examples.iter().flat_map(|e| e.features.last()).find(|k| k.0 >= dims) {
            return Err(DatasetError::Parse { line: 0, msg: format!("key {k} outside dims {dims}") });
        }
        Ok(Dataset { dims, examples })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Consecutive batches of `batch_size`; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        make_batches(&self.examples, batch_size)
    }

    /// Split off the last `fraction` of examples for evaluation.
    pub fn split_holdout(mut self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.examples.len();
        let held = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        let tail = self.examples.split_off(n - held);
        let dims = self.dims;
        (self, Dataset { dims, examples: tail })
    }
}

pub fn make_batches(examples: &[Example], batch_size: usize) -> Vec<Batch> {
    examples
        .chunks(batch_size.max(1))
        .enumerate()
        .map(|(i, c)| Batch { batch_id: i as u64, examples: c.to_vec() })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KeyDistribution {
    Uniform,
    Zipf(f64),
}

impl std::str::FromStr for KeyDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "uniform" {
            return Ok(KeyDistribution::Uniform);
        }
        let exp = s.strip_prefix("zipf").ok_or_else(|| format!("unknown distribution {s:?}"))?;
        let exp = exp.trim_start_matches([':', '(']).trim_end_matches(')');
        if exp.is_empty() {
            return Ok(KeyDistribution::Zipf(1.0));
        }
        exp.parse().map(KeyDistribution::Zipf).map_err(|e| format!("bad zipf exponent: {e}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub dims: u64,
    pub examples: usize,
    pub features_per_example: usize,
    pub distribution: KeyDistribution,
    /// Scale of the planted weights; larger means less label noise.
    pub signal: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            dims: 100_000,
            examples: 100_000,
            features_per_example: 10,
            distribution: KeyDistribution::Uniform,
            signal: 3.0,
            seed: 7,
        }
    }
}

/// The logistic model labels were drawn from.
#[derive(Clone, Debug)]
pub struct PlantedModel {
    pub weights: Vec<f64>,
}

impl PlantedModel {
    pub fn logit(&self, features: &[ParamKey]) -> f64 {
        features.iter().map(|k| self.weights[k.0 as usize]).sum()
    }
}

pub fn generate(spec: &GenSpec) -> Result<(Dataset, PlantedModel), DatasetError> {
    if spec.dims == 0 || spec.features_per_example == 0 {
        return Err(DatasetError::Spec("dims and features_per_example must be positive".into()));
    }
    if !spec.signal.is_finite() {
        return Err(DatasetError::Spec("signal must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.signal / (spec.features_per_example as f64).sqrt();
    let weights: Vec<f64> = (0..spec.dims)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    let planted = PlantedModel { weights };
    let zipf = match spec.distribution {
        KeyDistribution::Zipf(s) => Some(
            Zipf::new(spec.dims as f64, s).map_err(|e| DatasetError::Spec(format!("zipf: {e}")))?,
        ),
        KeyDistribution::Uniform => None,
    };
    let mut examples = Vec::with_capacity(spec.examples);
    for _ in 0..spec.examples {
        let keys: Vec<ParamKey> = (0..spec.features_per_example)
            .map(|_| {
                let k = match &zipf {
                    Some(z) => z.sample(&mut rng) as u64 - 1,
                    None => rng.random_range(0..spec.dims),
                };
                ParamKey(k.min(spec.dims - 1))
            })
            .collect();
        let mut ex = Example::new(0, keys).expect("non-empty features");
        let p = 1.0 / (1.0 + (-planted.logit(&ex.features)).exp());
        ex.label = u8::from(rng.random::<f64>() < p);
        examples.push(ex);
    }
    Ok((Dataset { dims: spec.dims, examples }, planted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::auc;
    use proptest::prelude::*;

    #[test]
    fn parses_worked_format() {
        let ds = Dataset::read_from("#dims=100\n1\t4,11,53\n0\t5,50,87\n".as_bytes()).unwrap();
        assert_eq!(ds.dims, 100);
        assert_eq!(ds.examples[0].features, [4, 11, 53].map(ParamKey).to_vec());
        assert_eq!(ds.examples[1].label, 0);
        assert_eq!(ds.to_text(), "#dims=100\n1\t4,11,53\n0\t5,50,87\n");
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in ["1\t1\n", "#dims=9\n2\t1\n", "#dims=9\n1\t3,2\n", "#dims=9\n1 3\n", "#dims=9\n1\t9\n"] {
            assert!(Dataset::read_from(bad.as_bytes()).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec { dims: 1000, examples: 200, ..GenSpec::default() };
        let a = generate(&spec).unwrap().0.to_text();
        let b = generate(&spec).unwrap().0.to_text();
        assert_eq!(a, b);
        let other = generate(&GenSpec { seed: 8, ..spec }).unwrap().0.to_text();
        assert_ne!(a, other);
    }

    #[test]
    fn planted_model_separates_its_own_data() {
        let spec = GenSpec { dims: 5000, examples: 5000, signal: 12.0, ..GenSpec::default() };
        let (ds, planted) = generate(&spec).unwrap();
        let labels: Vec<u8> = ds.examples.iter().map(|e| e.label).collect();
        let scores: Vec<f64> = ds.examples.iter().map(|e| planted.logit(&e.features)).collect();
        assert!(auc(&labels, &scores).unwrap() > 0.95);
    }

    #[test]
    fn zipf_head_carries_the_mass() {
        let spec = GenSpec {
            dims: 100_000,
            examples: 20_000,
            distribution: KeyDistribution::Zipf(1.0),
            ..GenSpec::default()
        };
        let (ds, _) = generate(&spec).unwrap();
        let mut counts = std::collections::HashMap::<u64, u64>::new();
        let mut total = 0u64;
        for ex in &ds.examples {
            for k in &ex.features {
                *counts.entry(k.0).or_default() += 1;
                total += 1;
            }
        }
        let mut c: Vec<u64> = counts.into_values().collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        let head: u64 = c.iter().take((spec.dims / 100) as usize).sum();
        assert!(head as f64 >= 0.3 * total as f64, "head {head} of {total}");
    }

    #[test]
    fn batches_keep_trailing_examples() {
        let spec = GenSpec { dims: 100, examples: 10, ..GenSpec::default() };
        let (ds, _) = generate(&spec).unwrap();
        let b = ds.batches(4);
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b[2].batch_id, 2);
        assert!(Dataset { dims: 1, examples: vec![] }.batches(4).is_empty());
    }

    #[test]
    fn distribution_names() {
        assert_eq!("uniform".parse::<KeyDistribution>().unwrap(), KeyDistribution::Uniform);
        assert_eq!("zipf".parse::<KeyDistribution>().unwrap(), KeyDistribution::Zipf(1.0));
        assert_eq!("zipf:1.2".parse::<KeyDistribution>().unwrap(), KeyDistribution::Zipf(1.2));
        assert!("normal".parse::<KeyDistribution>().is_err());
    }

    fn arb_example() -> impl Strategy<Value = Example> {
        (0u8..2, prop::collection::btree_set(0u64..1000, 0..12)).prop_map(|(label, keys)| Example {
            label,
            features: keys.into_iter().map(ParamKey).collect(),
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(examples in prop::collection::vec(arb_example(), 0..40)) {
            let ds = Dataset { dims: 1000, examples };
            let back = Dataset::read_from(ds.to_text().as_bytes()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
