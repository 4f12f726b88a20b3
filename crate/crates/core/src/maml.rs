//! Model-agnostic meta-learning: inner gradient steps on each task's
//! support set, an outer Adam step on the summed query losses at the
//! adapted parameters.
//!
//! The outer gradient is first-order by default. Models that provide a
//! Hessian-vector product also support the exact gradient through the
//! inner steps, `prod_i (I - beta H_i) grad L_query`.

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Adam, AdamConfig, EmbeddingParams, Mode, Objective, TrainSample};

/// Anything with a flat parameter vector and a differentiable batch loss.
pub trait MetaModel: Clone {
    type Sample;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Loss and gradient on a batch. May update internal statistics that
    /// are not trained by gradient (normalisation running averages).
    fn loss_grad(&mut self, batch: &[&Self::Sample]) -> Result<(f64, Vec<f64>)>;

    /// Hessian of the batch loss times `v`.
    fn hvp(&self, _batch: &[&Self::Sample], _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::InvalidSpec("model has no Hessian-vector product; use first_order".into()))
    }

    /// Takes over non-gradient state from an adapted copy.
    fn absorb_state(&mut self, _adapted: &Self) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MamlConfig {
    /// Inner (task) learning rate `beta`.
    pub inner_lr: f64,
    /// Outer (meta) learning rate `alpha`, used by Adam.
    pub outer_lr: f64,
    /// Inner gradient steps `j`, also used by [`maml_adapt`].
    pub inner_steps: usize,
    /// Tasks per meta-batch `L`.
    pub tasks_per_batch: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub meta_iters: usize,
    pub first_order: bool,
    pub seed: u64,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.05,
            outer_lr: 1e-3,
            inner_steps: 5,
            tasks_per_batch: 4,
            support_size: 20,
            query_size: 20,
            meta_iters: 100,
            first_order: true,
            seed: 0,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0) || !(self.outer_lr > 0.0) {
            return Err(Error::InvalidSpec("MAML learning rates must be positive".into()));
        }
        if self.tasks_per_batch == 0 || self.support_size == 0 || self.query_size == 0 {
            return Err(Error::InvalidSpec("MAML batch and set sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MamlOutcome<M> {
    pub model: M,
    /// Summed query loss of every meta-iteration.
    pub meta_loss_trace: Vec<f64>,
    /// Forward/backward passes (gradient and Hessian-vector evaluations).
    pub passes: usize,
}

/// Support and query indices into one pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDraw {
    pub pool: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws a task: a uniformly chosen pool with at least two samples and
/// disjoint support/query subsets. Pools smaller than
/// `support_size + query_size` are split in half.
pub fn sample_task<R: Rng>(pool_sizes: &[usize], cfg: &MamlConfig, rng: &mut R) -> Result<TaskDraw> {
    let usable: Vec<usize> = (0..pool_sizes.len()).filter(|&i| pool_sizes[i] >= 2).collect();
    let &pool = usable.choose(rng).ok_or(Error::Empty("MAML task pools"))?;
    let n = pool_sizes[pool];
    let (ns, nq) = if n >= cfg.support_size + cfg.query_size {
        (cfg.support_size, cfg.query_size)
    } else {
        (n.div_ceil(2), n / 2)
    };
    let picked = index::sample(rng, n, ns + nq).into_vec();
    Ok(TaskDraw {
        pool,
        support: picked[..ns].to_vec(),
        query: picked[ns..].to_vec(),
    })
}

/// Plain gradient steps from `theta`. Returns the adapted model, the
/// iterates before every step (for exact second order), the loss before
/// every step, and the pass count.
pub fn inner_loop<M: MetaModel>(
    theta: &M,
    support: &[&M::Sample],
    lr: f64,
    steps: usize,
    keep_path: bool,
) -> Result<(M, Vec<M>, Vec<f64>, usize)> {
    let mut phi = theta.clone();
    let mut path = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        if keep_path {
            path.push(phi.clone());
        }
        let (loss, grad) = phi.loss_grad(support)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite inner loss {loss}")));
        }
        losses.push(loss);
        for (p, g) in phi.params_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    Ok((phi, path, losses, steps))
}

/// Support and query halves of one task.
pub type Task<'a, S> = (Vec<&'a S>, Vec<&'a S>);

/// Meta-loss `sum_k L_query(phi_k)` over the given tasks and its gradient
/// with respect to `theta`. Non-gradient state of `theta` is updated from
/// each adapted copy in turn.
pub fn meta_gradient<M: MetaModel>(
    theta: &mut M,
    tasks: &[Task<M::Sample>],
    cfg: &MamlConfig,
) -> Result<(f64, Vec<f64>, usize)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; theta.params().len()];
    let mut passes = 0;
    for (support, query) in tasks {
        let (mut phi, path, _, p) = inner_loop(theta, support, cfg.inner_lr, cfg.inner_steps, !cfg.first_order)?;
        passes += p;
        let (lq, mut g) = phi.loss_grad(query)?;
        passes += 1;
        if !cfg.first_order {
            for state in path.iter().rev() {
                let hv = state.hvp(support, &g)?;
                passes += 1;
                for (gi, h) in g.iter_mut().zip(&hv) {
                    *gi -= cfg.inner_lr * h;
                }
            }
        }
        total += lq;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        theta.absorb_state(&phi);
    }
    Ok((total, grad, passes))
}

/// Meta-training over task pools (one pool per environment or slot).
pub fn maml_pretrain<M: MetaModel>(
    theta0: &M,
    pools: &[Vec<M::Sample>],
    cfg: &MamlConfig,
) -> Result<MamlOutcome<M>> {
    maml_pretrain_until(theta0, pools, cfg, |_, _| false)
}

/// [`maml_pretrain`] that stops early once `done(iteration, meta_loss)`
/// holds.
pub fn maml_pretrain_until<M: MetaModel>(
    theta0: &M,
    pools: &[Vec<M::Sample>],
    cfg: &MamlConfig,
    mut done: impl FnMut(usize, f64) -> bool,
) -> Result<MamlOutcome<M>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();
    let mut theta = theta0.clone();
    let mut adam = Adam::new(theta.params().len(), AdamConfig::with_lr(cfg.outer_lr));
    let mut out = MamlOutcome {
        model: theta0.clone(),
        meta_loss_trace: Vec::new(),
        passes: 0,
    };
    for it in 0..cfg.meta_iters {
        let mut tasks = Vec::with_capacity(cfg.tasks_per_batch);
        for _ in 0..cfg.tasks_per_batch {
            let d = sample_task(&sizes, cfg, &mut rng)?;
            let pool = &pools[d.pool];
            tasks.push((
                d.support.iter().map(|&i| &pool[i]).collect::<Vec<_>>(),
                d.query.iter().map(|&i| &pool[i]).collect::<Vec<_>>(),
            ));
        }
        let (loss, grad, passes) = meta_gradient(&mut theta, &tasks, cfg)?;
        out.passes += passes;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite meta-loss {loss} at iteration {it}")));
        }
        let n = theta.params().len();
        adam.step(theta.params_mut(), &grad, 0..n);
        out.meta_loss_trace.push(loss);
        if done(it, loss) {
            break;
        }
    }
    out.model = theta;
    Ok(out)
}

/// `inner_steps` gradient steps with rate `inner_lr` on the whole
/// adaptation set. Returns the adapted model and the loss before each step.
pub fn maml_adapt<M: MetaModel>(theta: &M, data: &[&M::Sample], cfg: &MamlConfig) -> Result<(M, Vec<f64>)> {
    let (phi, _, losses, _) = inner_loop(theta, data, cfg.inner_lr, cfg.inner_steps, false)?;
    Ok((phi, losses))
}

/// Shuffled copy of a pool; used when building task pools from datasets.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// The embedding network as a meta-learner: supervised MSE on the
/// normalised powers `K q / P` (the regular loss times `(K/P)^2`, so inner
/// learning rates do not depend on the power budget), with batch
/// statistics; running averages follow the adapted copies.
impl MetaModel for EmbeddingParams {
    type Sample = TrainSample;

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn loss_grad(&mut self, batch: &[&TrainSample]) -> Result<(f64, Vec<f64>)> {
        let (loss, mut grad, cache) = self.loss_and_grad(Objective::SupervisedMse, batch, &[], Mode::Train)?;
        self.update_running_stats(&cache);
        let s = (self.arch.k as f64 / self.power_budget).powi(2);
        grad.iter_mut().for_each(|g| *g *= s);
        Ok((loss * s, grad))
    }

    fn absorb_state(&mut self, adapted: &Self) {
        self.bn1 = adapted.bn1.clone();
        self.bn2 = adapted.bn2.clone();
    }
}

/// Two-parameter regressor `y = a tanh(b x)` with squared loss, small
/// enough for an exact Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    pub theta: [f64; 2],
}

impl ToyNet {
    pub fn predict(&self, x: f64) -> f64 {
        self.theta[0] * (self.theta[1] * x).tanh()
    }

    pub fn loss(&self, batch: &[&(f64, f64)]) -> f64 {
        batch.iter().map(|(x, t)| 0.5 * (self.predict(*x) - t).powi(2)).sum::<f64>() / batch.len() as f64
    }
}

impl MetaModel for ToyNet {
    type Sample = (f64, f64);

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn loss_grad(&mut self, batch: &[&(f64, f64)]) -> Result<(f64, Vec<f64>)> {
        let [a, b] = self.theta;
        let n = batch.len() as f64;
        let mut g = vec![0.0; 2];
        for (x, t) in batch {
            let u = (b * x).tanh();
            let r = a * u - t;
            g[0] += r * u / n;
            g[1] += r * a * x * (1.0 - u * u) / n;
        }
        Ok((self.loss(batch), g))
    }

    fn hvp(&self, batch: &[&(f64, f64)], v: &[f64]) -> Result<Vec<f64>> {
        let [a, b] = self.theta;
        let n = batch.len() as f64;
        let mut h = [[0.0; 2]; 2];
        for (x, t) in batch {
            let u = (b * x).tanh();
            let s = 1.0 - u * u;
            let r = a * u - t;
            let dy = [u, a * x * s];
            let d2 = [[0.0, x * s], [x * s, -2.0 * a * x * x * u * s]];
            for i in 0..2 {
                for j in 0..2 {
                    h[i][j] += (dy[i] * dy[j] + r * d2[i][j]) / n;
                }
            }
        }
        Ok((0..2).map(|i| h[i][0] * v[0] + h[i][1] * v[1]).collect())
    }
}
