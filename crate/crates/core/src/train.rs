//! Shared pieces of the training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};
use crate::params::{Bound, ParamStore};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "TAPE_THREADS";

/// Builds one loss graph over `store`, backpropagates, and adds
/// `scale · ∂loss` to the trainable gradient buffers. Returns the loss.
pub fn accumulate_sample<F>(store: &mut ParamStore<f32>, scale: f32, build: F) -> Result<f32>
where
    F: for<'g> FnOnce(&mut Graph<'g, f32>, &Bound) -> Result<Var>,
{
    let (loss, grads, bound) = {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(value as f64));
        }
        (value, g.backward(loss)?, bound)
    };
    store.accumulate_grads(&bound, &grads, scale);
    Ok(loss)
}

/// Independent RNG for a named purpose within a run.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A fresh permutation of `0..n` for each epoch.
pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Evaluation thread count: `TAPE_THREADS` if set, else the available
/// parallelism.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item on up to `threads` scoped threads, keeping
/// input order in the output.
pub fn par_map<I, O, F>(items: &[I], threads: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<O>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    })
}
