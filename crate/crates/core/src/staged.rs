//! Training with only `p` of the `K` subgraph tensors resident.
//!
//! Each stage keeps an explicit history `H^(t-1)` of the aggregated features
//! and trains fresh coefficients `b` (for the `p` sampled subgraphs) and a
//! scalar `α`:
//!
//! ```text
//! H^(t)[l] = α·H^(t-1)[l] + Σ_j b[j][l] ⊙ H^{S_j}[l]
//! ```
//!
//! At a stage boundary the history is advanced and `b`, `α` are folded into
//! the global coefficients, `a[i] ← b[i] + α·a[i]` for sampled `i` and
//! `a[i] ← α·a[i]` otherwise, so `aggregate(all K, a)` keeps matching the
//! history.

use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::{Lease, MemoryAccountant};
use crate::error::{NarsError, Result};
use crate::matrix::Matrix;
use crate::model::{accumulate_weighted, weighted_grad, Adam, AggCoefficients};
use crate::propagate::{HopFeatureTensor, HopSource};
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Subgraphs resident per stage.
    pub p: usize,
    pub epochs_per_stage: usize,
    /// Load the next stage's tensors on a background thread.
    pub prefetch: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { p: 1, epochs_per_stage: 10, prefetch: false }
    }
}

struct Resident<T> {
    tensor: HopFeatureTensor<T>,
    _lease: Lease,
}

fn load_resident<T: Scalar>(source: &dyn HopSource<T>, ids: &[usize], acct: &MemoryAccountant) -> Result<Vec<Resident<T>>> {
    ids.iter()
        .map(|&i| {
            let tensor = source.load(i)?;
            let _lease = acct.lease(tensor.bytes());
            Ok(Resident { tensor, _lease })
        })
        .collect()
}

/// `H^(0)[l] = Σ_i a[i][l] ⊙ H^i[l]`, loading one tensor at a time.
pub fn init_history<T: Scalar>(
    source: &dyn HopSource<T>,
    a: &AggCoefficients<T>,
    acct: &MemoryAccountant,
) -> Result<(Vec<Matrix<T>>, Lease)> {
    let (k, levels, rows, dim) = (source.num_subgraphs(), source.num_hops(), source.rows(), source.dim());
    if a.k() != k || a.levels() != levels || a.dim() != dim {
        return Err(NarsError::Dimension(format!(
            "coefficients {}x{}x{} do not match {k} subgraphs of {levels} hops x {dim}",
            a.k(),
            a.levels(),
            a.dim()
        )));
    }
    let mut history = vec![Matrix::zeros(rows, dim); levels];
    let lease = acct.lease(levels * rows * dim * T::BYTES);
    for i in 0..k {
        let r = load_resident(source, &[i], acct)?;
        for (l, h) in r[0].tensor.hops.iter().enumerate() {
            accumulate_weighted(&mut history[l], h, a.get(i, l));
        }
    }
    Ok((history, lease))
}

/// `a′[i] = b[j] + α·a[i]` where `i = members[j]`, and `α·a[i]` elsewhere.
pub fn fold_coefficients<T: Scalar>(
    a: &AggCoefficients<T>,
    b: &AggCoefficients<T>,
    alpha: T,
    members: &[usize],
) -> Result<AggCoefficients<T>> {
    if b.k() != members.len() || b.levels() != a.levels() || b.dim() != a.dim() {
        return Err(NarsError::Dimension("stage coefficients do not match the global ones".into()));
    }
    let mut out = a.clone();
    out.data.scale(alpha);
    for (j, &i) in members.iter().enumerate() {
        if i >= a.k() {
            return Err(NarsError::OutOfRange { what: "subgraph".into(), id: i, count: a.k() });
        }
        for (x, &y) in out.data.row_mut(i).iter_mut().zip(b.data.row(j)) {
            *x += y;
        }
    }
    Ok(out)
}

pub fn history_sha256<T: Scalar>(history: &[Matrix<T>]) -> String {
    let mut h = Sha256::new();
    for m in history {
        for v in m.as_slice() {
            h.update(v.widen().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to resume a staged run at any point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StageSnapshot<T> {
    pub stage: usize,
    pub members: Vec<usize>,
    pub next_members: Vec<usize>,
    pub b: AggCoefficients<T>,
    pub alpha: T,
    pub adam: Adam<T>,
    pub history: Vec<Matrix<T>>,
    pub history_sha256: String,
    pub rng: ChaCha8Rng,
}

pub struct StageState<T: Scalar> {
    config: StageConfig,
    stage: usize,
    members: Vec<usize>,
    next_members: Vec<usize>,
    b: AggCoefficients<T>,
    alpha: Matrix<T>,
    adam: Adam<T>,
    history: Vec<Matrix<T>>,
    _history_lease: Lease,
    resident: Vec<Resident<T>>,
    pending: Option<JoinHandle<Result<Vec<Resident<T>>>>>,
    rng: ChaCha8Rng,
    source: Arc<dyn HopSource<T>>,
    acct: MemoryAccountant,
}

impl<T: Scalar> StageState<T> {
    pub fn new(
        source: Arc<dyn HopSource<T>>,
        a: &AggCoefficients<T>,
        config: StageConfig,
        lr: f64,
        seed: u64,
        acct: MemoryAccountant,
    ) -> Result<Self> {
        let k = source.num_subgraphs();
        if config.p == 0 || config.p > k {
            return Err(NarsError::Invalid(format!("stage size p={} must be in 1..={k}", config.p)));
        }
        if config.epochs_per_stage == 0 {
            return Err(NarsError::Invalid("epochs per stage must be positive".into()));
        }
        let (history, lease) = init_history(source.as_ref(), a, &acct)?;
        let mut rng = rng_for(seed, Stream::StageSampling);
        let members = sample_members(k, config.p, &mut rng);
        let next_members = sample_members(k, config.p, &mut rng);
        let b = AggCoefficients::zeros(config.p, a.levels(), a.dim());
        let alpha = Matrix::filled(1, 1, T::one());
        let adam = Adam::new(lr, [&b.data, &alpha]);
        let mut st = StageState {
            config,
            stage: 0,
            members,
            next_members,
            b,
            alpha,
            adam,
            history,
            _history_lease: lease,
            resident: Vec::new(),
            pending: None,
            rng,
            source,
            acct,
        };
        st.resident = load_resident(st.source.as_ref(), &st.members, &st.acct)?;
        st.start_prefetch();
        Ok(st)
    }

    pub fn restore(
        source: Arc<dyn HopSource<T>>,
        snap: StageSnapshot<T>,
        config: StageConfig,
        acct: MemoryAccountant,
    ) -> Result<Self> {
        if history_sha256(&snap.history) != snap.history_sha256 {
            return Err(NarsError::Format("stage history does not match its checksum".into()));
        }
        if snap.members.len() != config.p || snap.b.k() != config.p {
            return Err(NarsError::Dimension("snapshot stage size differs from the configuration".into()));
        }
        let bytes = snap.history.iter().map(Matrix::bytes).sum();
        let mut st = StageState {
            config,
            stage: snap.stage,
            members: snap.members,
            next_members: snap.next_members,
            b: snap.b,
            alpha: Matrix::filled(1, 1, snap.alpha),
            adam: snap.adam,
            history: snap.history,
            _history_lease: acct.lease(bytes),
            resident: Vec::new(),
            pending: None,
            rng: snap.rng,
            source,
            acct,
        };
        st.resident = load_resident(st.source.as_ref(), &st.members, &st.acct)?;
        st.start_prefetch();
        Ok(st)
    }

    pub fn snapshot(&self) -> StageSnapshot<T> {
        StageSnapshot {
            stage: self.stage,
            members: self.members.clone(),
            next_members: self.next_members.clone(),
            b: self.b.clone(),
            alpha: self.alpha(),
            adam: self.adam.clone(),
            history: self.history.clone(),
            history_sha256: history_sha256(&self.history),
            rng: self.rng.clone(),
        }
    }

    fn start_prefetch(&mut self) {
        if !self.config.prefetch {
            return;
        }
        let source = Arc::clone(&self.source);
        let ids = self.next_members.clone();
        let acct = self.acct.clone();
        self.pending = Some(std::thread::spawn(move || load_resident(source.as_ref(), &ids, &acct)));
    }

    pub fn config(&self) -> &StageConfig {
        &self.config
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn history(&self) -> &[Matrix<T>] {
        &self.history
    }

    pub fn b(&self) -> &AggCoefficients<T> {
        &self.b
    }

    pub fn b_mut(&mut self) -> &mut AggCoefficients<T> {
        &mut self.b
    }

    pub fn alpha(&self) -> T {
        self.alpha.get(0, 0)
    }

    pub fn set_alpha(&mut self, v: T) {
        self.alpha.set(0, 0, v);
    }

    pub fn accountant(&self) -> &MemoryAccountant {
        &self.acct
    }

    /// `H^(t)` restricted to `rows`.
    pub fn inputs(&self, rows: &[usize]) -> Result<Vec<Matrix<T>>> {
        if self.resident.len() != self.members.len() {
            return Err(NarsError::Invalid("stage tensors are not resident".into()));
        }
        let alpha = self.alpha();
        let mut out = Vec::with_capacity(self.history.len());
        for (l, hist) in self.history.iter().enumerate() {
            let mut x = hist.gather_rows(rows);
            x.scale(alpha);
            for (j, r) in self.resident.iter().enumerate() {
                accumulate_weighted(&mut x, &r.tensor.hops[l].gather_rows(rows), self.b.get(j, l));
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Gradients for `b` and `α` given `∂loss/∂H^(t)` on `rows`.
    pub fn backward(&self, rows: &[usize], dx: &[Matrix<T>]) -> (AggCoefficients<T>, T) {
        let mut db = AggCoefficients::zeros(self.b.k(), self.b.levels(), self.b.dim());
        let mut dalpha = T::zero();
        for (l, d) in dx.iter().enumerate() {
            let h = self.history[l].gather_rows(rows);
            dalpha += h.as_slice().iter().zip(d.as_slice()).map(|(x, y)| *x * *y).sum::<T>();
            for (j, r) in self.resident.iter().enumerate() {
                weighted_grad(&r.tensor.hops[l].gather_rows(rows), d, db.get_mut(j, l));
            }
        }
        (db, dalpha)
    }

    pub fn step(&mut self, db: &AggCoefficients<T>, dalpha: T) {
        let grads = [db.data.clone(), Matrix::filled(1, 1, dalpha)];
        self.adam.update([&mut self.b.data, &mut self.alpha], &grads);
    }

    /// Global coefficients with the current stage folded in.
    pub fn folded(&self, a: &AggCoefficients<T>) -> Result<AggCoefficients<T>> {
        fold_coefficients(a, &self.b, self.alpha(), &self.members)
    }

    /// Ends the current stage: advances the history, folds `b` and `α` into
    /// `a`, swaps in the next stage's tensors and resets `b`, `α` and their
    /// optimizer state.
    pub fn advance(&mut self, a: &mut AggCoefficients<T>) -> Result<()> {
        let alpha = self.alpha();
        for (l, hist) in self.history.iter_mut().enumerate() {
            hist.scale(alpha);
            for (j, r) in self.resident.iter().enumerate() {
                accumulate_weighted(hist, &r.tensor.hops[l], self.b.get(j, l));
            }
        }
        *a = self.folded(a)?;
        self.resident.clear();
        self.members = std::mem::replace(
            &mut self.next_members,
            sample_members(self.source.num_subgraphs(), self.config.p, &mut self.rng),
        );
        self.resident = match self.pending.take() {
            Some(h) => h.join().map_err(|_| NarsError::Invalid("prefetch thread panicked".into()))??,
            None => load_resident(self.source.as_ref(), &self.members, &self.acct)?,
        };
        self.start_prefetch();
        self.b = AggCoefficients::zeros(self.b.k(), self.b.levels(), self.b.dim());
        self.set_alpha(T::one());
        self.adam.reset();
        self.stage += 1;
        Ok(())
    }
}

impl<T: Scalar> Drop for StageState<T> {
    fn drop(&mut self) {
        if let Some(h) = self.pending.take() {
            let _ = h.join();
        }
    }
}

/// `p` distinct subgraph ids in ascending order.
fn sample_members(k: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = index::sample(rng, k, p).into_vec();
    v.sort_unstable();
    v
}
