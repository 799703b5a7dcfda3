//! Single-process reference trainer: one flat map, no tiers, no messages.
//!
//! It walks the data exactly as the distributed engine partitions it (round
//! `t` covers batches `t * nodes .. (t + 1) * nodes`, each sharded over
//! devices and mini-batches) and applies the same aggregation: per key the
//! replicas' SGD deltas added in replica order, and the dense gradients
//! summed in replica order and divided by the replica count.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::model::{apply_update, backward, forward, sgd_delta, Batch, DenseParams, ParamKey, SparseParam, TrainedModel};
use crate::pipeline::{keys_of, shard_batch, PipelineError};

/// Every parameter in one place. Keys are zero-initialized on first touch.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatStore {
    pub sparse: BTreeMap<ParamKey, SparseParam>,
    pub dense: DenseParams,
}

impl FlatStore {
    fn touch(&mut self, keys: &[ParamKey]) {
        let width = self.dense.input_width();
        for &k in keys {
            self.sparse.entry(k).or_insert_with(|| SparseParam::zeros(width));
        }
    }
}

pub fn train_reference(cfg: &RunConfig, batches: &[Batch]) -> Result<TrainedModel, PipelineError> {
    cfg.validate()?;
    let topo = cfg.topology();
    let (nodes, devices) = (topo.num_nodes as usize, topo.devices_per_node as usize);
    let lr = cfg.model.lr;
    let mut store = FlatStore { sparse: BTreeMap::new(), dense: cfg.model.init_dense()? };
    let dense_len = store.dense.weights.len();

    for round in batches.chunks(nodes) {
        // [node][device][minibatch]; nodes past the end get empty shards.
        let shards = (0..nodes)
            .map(|n| {
                let examples = round.get(n).map_or(&[][..], |b| b.examples.as_slice());
                shard_batch(examples, devices, cfg.minibatches)
            })
            .collect::<Result<Vec<_>, _>>()?;
        for j in 0..cfg.minibatches {
            let mut deltas: BTreeMap<ParamKey, Vec<Vec<f32>>> = BTreeMap::new();
            let mut dense_sum = vec![0.0f64; dense_len];
            for node_shards in &shards {
                for dev_shards in node_shards {
                    let shard = &dev_shards[j];
                    store.touch(&keys_of(shard));
                    let preds = forward(shard, &store.sparse, &store.dense)?;
                    let g = backward(shard, &store.sparse, &store.dense, &preds)?;
                    for (k, grad) in &g.sparse {
                        deltas.entry(*k).or_default().push(sgd_delta(grad, lr));
                    }
                    for (s, &v) in dense_sum.iter_mut().zip(&g.dense) {
                        *s += f64::from(v);
                    }
                }
            }
            for (k, ds) in deltas {
                let p = store.sparse.get_mut(&k).expect("touched");
                for d in ds {
                    for (a, b) in p.embedding.iter_mut().zip(&d) {
                        *a += b;
                    }
                }
            }
            let replicas = f64::from(topo.replicas());
            let avg: Vec<f32> = dense_sum.iter().map(|s| (s / replicas) as f32).collect();
            apply_update(&mut store.dense, &avg, lr)?;
        }
    }
    Ok(TrainedModel::new(store.dense, store.sparse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenSpec};

    fn cfg(nodes: u32, devices: u32) -> RunConfig {
        RunConfig { nodes, devices, batch_size: 64, minibatches: 2, ..RunConfig::default() }
    }

    fn data() -> Vec<Batch> {
        let (ds, _) = generate(&GenSpec { dims: 500, examples: 600, ..GenSpec::default() }).unwrap();
        ds.batches(64)
    }

    #[test]
    fn same_inputs_give_bit_identical_models() {
        let a = train_reference(&cfg(2, 2), &data()).unwrap();
        let b = train_reference(&cfg(2, 2), &data()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_improves_the_fit() {
        let (ds, _) = generate(&GenSpec { dims: 200, examples: 4000, ..GenSpec::default() }).unwrap();
        let batches = ds.batches(64);
        let examples = ds.examples;
        // Untrained embeddings are zero, so every example scores the same.
        let fresh = TrainedModel::new(cfg(1, 1).model.init_dense().unwrap(), BTreeMap::new());
        assert_eq!(fresh.auc(&examples).unwrap(), 0.5);
        let trained = train_reference(&cfg(1, 1), &batches).unwrap();
        let auc = trained.auc(&examples).unwrap();
        assert!(auc > 0.7, "training auc {auc}");
    }

    #[test]
    fn every_trained_key_exists_and_nothing_else() {
        let batches = data();
        let m = train_reference(&cfg(2, 1), &batches).unwrap();
        let keys: std::collections::BTreeSet<ParamKey> =
            batches.iter().flat_map(|b| b.examples.iter().flat_map(|e| e.features.clone())).collect();
        assert!(m.sparse.keys().copied().eq(keys.into_iter()));
    }

    #[test]
    fn empty_data_returns_the_initial_model() {
        let m = train_reference(&cfg(1, 1), &[]).unwrap();
        assert_eq!(m.dense, cfg(1, 1).model.init_dense().unwrap());
        assert!(m.sparse.is_empty());
    }
}
