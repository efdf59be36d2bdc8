#![allow(dead_code)]

use deps::numeric::gradcheck::{probe, Probe};
use deps::numeric::{Gradients, ParamId, ParameterStore};
use deps::recommender::{DepsModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 4,
        layers: 1,
        heads: 2,
        max_len: 6,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(users: usize, items: usize, seed: u64) -> DepsModel {
    DepsModel::new(tiny_config(), users, items, 0.05, seed).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_seq<R: Rng>(rng: &mut R, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Random coordinates spread over the given parameters.
pub fn coords<R: Rng>(store: &ParameterStore, ids: &[ParamId], per_param: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    ids.iter()
        .flat_map(|&id| {
            let n = store.value(id).len();
            (0..per_param.min(n))
                .map(|_| (id, rng.random_range(0..n)))
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn check_probes(probes: &[Probe]) {
    for p in probes {
        let err = p.rel_error(1e-6);
        assert!(
            err < REL_TOL,
            "param {:?}[{}]: analytic {} vs numeric {} (rel {err:e})",
            p.param,
            p.index,
            p.analytic,
            p.numeric
        );
    }
}

pub fn run_probes<F>(store: &mut ParameterStore, grads: &Gradients, coords: &[(ParamId, usize)], loss: F) -> Vec<Probe>
where
    F: FnMut(&ParameterStore) -> f64,
{
    probe(store, grads, coords, H, loss)
}
