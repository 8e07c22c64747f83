//! Stage 2: cross-entropy training of the hypernetwork and the temperature.
//!
//! Temperature follows a two-phase schedule. While decay is active, τ is
//! multiplied by the decay rate after every epoch whose NEC is still at or
//! above the threshold; the first epoch below the threshold switches decay
//! off for good, and from then on τ is learned by Adam from the sparsemax
//! temperature gradient (summed over class columns).

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::checkpoint::HeadCheckpoint;
use crate::error::{dim_err, FcbmError, Result};
use crate::hypernet::{
    align_inputs, compute_alignment_stats, hypernet_backward, hypernet_forward, output_alignment, select,
    select_backward, ColumnAffine, HypernetParams, Selector, DEFAULT_HIDDEN,
};
use crate::io::ConceptSet;
use crate::metrics::{accuracy, nec};
use crate::numeric::{argmax, column_mean_std, matmul, matmul_tn, AdamConfig, AdamState, Matrix, Rng};
use crate::projector::{ConceptValueStats, DEFAULT_BATCH, STD_FLOOR};

/// Learned τ is clamped from below at this value.
pub const TAU_MIN: f64 = 1e-6;

/// Margin added to the automatic initial temperature.
pub const TAU_AUTO_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Sparsemax with decayed-then-learned temperature.
    Full,
    /// Sparsemax, τ only ever decayed, never learned.
    FixedTemp,
    /// Top-K magnitude truncation instead of sparsemax.
    Hard,
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::FixedTemp => "fixed-temp",
            AblationMode::Hard => "hard",
        })
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(AblationMode::Full),
            "fixed-temp" => Ok(AblationMode::FixedTemp),
            "hard" => Ok(AblationMode::Hard),
            other => Err(format!("unknown mode {other:?} (full, fixed-temp, hard)")),
        }
    }
}

/// Initial temperature: a fixed value, or the smallest τ giving every column full support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauInit {
    Auto,
    Fixed(f64),
}

impl fmt::Display for TauInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauInit::Auto => f.write_str("auto"),
            TauInit::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl std::str::FromStr for TauInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(TauInit::Auto);
        }
        s.parse::<f64>()
            .map(TauInit::Fixed)
            .map_err(|_| format!("tau0 must be \"auto\" or a number, got {s:?}"))
    }
}

impl Serialize for TauInit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TauInit::Auto => s.serialize_str("auto"),
            TauInit::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for TauInit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(TauInit::Fixed(v)),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_rate: f64,
    pub nec_threshold: f64,
    pub tau0: TauInit,
    pub seed: u64,
    pub mode: AblationMode,
    pub hard_k: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    /// Small-scale defaults.
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            batch_size: DEFAULT_BATCH,
            lr: 1e-3,
            decay_rate: 0.998,
            nec_threshold: 30.0,
            tau0: TauInit::Auto,
            seed: 0,
            mode: AblationMode::Full,
            hard_k: 30,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    /// Large-scale defaults: fewer epochs, faster decay.
    pub fn large_scale() -> Self {
        TrainConfig {
            epochs: 500,
            decay_rate: 0.92,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(FcbmError::Invariant(format!(
                "decay rate must be in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if !(self.nec_threshold > 0.0) {
            return Err(FcbmError::Invariant(format!(
                "NEC threshold must be positive, got {}",
                self.nec_threshold
            )));
        }
        if !(self.lr > 0.0) {
            return Err(FcbmError::Invariant(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let TauInit::Fixed(v) = self.tau0 {
            if !(v > 0.0) {
                return Err(FcbmError::Invariant(format!("initial temperature must be positive, got {v}")));
            }
        }
        if self.hidden == 0 || self.batch_size == 0 || self.hard_k == 0 {
            return Err(FcbmError::Invariant(
                "hidden width, batch size and hard-k must be positive".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub nec: f64,
    pub tau: f64,
    pub decay_active: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

/// Mean softmax cross-entropy and `(softmax − onehot)/N`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(dim_err!("{} logit rows for {} labels", logits.rows(), labels.len()));
    }
    let n = logits.cols();
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= n) {
        return Err(FcbmError::Data(format!("label {l} at row {i} is out of range for {n} classes")));
    }
    let batch = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), n);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        let g = grad.row_mut(i);
        for (j, z) in row.iter().enumerate() {
            g[j] = ((z - lse).exp() - if j == label { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// One step of the decay schedule; returns `(τ′, decay_active′)`.
pub fn temperature_schedule_step(tau: f64, config: &TrainConfig, nec: f64, decay_active: bool) -> (f64, bool) {
    if !decay_active {
        return (tau, false);
    }
    if nec >= config.nec_threshold {
        (tau * config.decay_rate, true)
    } else {
        (tau, false)
    }
}

/// `Fixed(v)` → v; `Auto` → `maxⱼ Σᵢ (H_ij − minᵢ H_ij)` plus a small margin.
pub fn initial_temperature(h0: &Matrix, policy: TauInit) -> Result<f64> {
    match policy {
        TauInit::Fixed(v) if v > 0.0 && v.is_finite() => Ok(v),
        TauInit::Fixed(v) => Err(FcbmError::Invariant(format!("initial temperature must be positive, got {v}"))),
        TauInit::Auto => {
            let mut best: f64 = 0.0;
            for j in 0..h0.cols() {
                let col = h0.column(j);
                let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
                best = best.max(col.iter().map(|x| x - min).sum());
            }
            Ok(best + TAU_AUTO_MARGIN)
        }
    }
}

/// Concept values, labels and class count for one training split.
#[derive(Debug, Clone, Copy)]
pub struct HeadData<'a> {
    /// Standardized concept values, `N × m`.
    pub values: &'a Matrix,
    pub labels: &'a [usize],
    pub num_classes: usize,
}

impl HeadData<'_> {
    fn check(&self, concepts: usize) -> Result<()> {
        if self.values.rows() != self.labels.len() {
            return Err(dim_err!("{} value rows for {} labels", self.values.rows(), self.labels.len()));
        }
        if self.values.cols() != concepts {
            return Err(dim_err!(
                "values have {} concept columns but the pool has {concepts} concepts",
                self.values.cols()
            ));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(FcbmError::Data(format!(
                "label {l} at row {i} is out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Result of a training run. When `aborted` is set, `checkpoint` is the last
/// state before the first non-finite value.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: HeadCheckpoint,
    pub log: TrainLog,
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(HeadCheckpoint, TrainLog)> {
        match self.aborted {
            Some(msg) => Err(FcbmError::Numeric(msg)),
            None => Ok((self.checkpoint, self.log)),
        }
    }
}

/// Mutable training state shared by fresh training and fine-tuning.
struct Session<'a> {
    config: &'a TrainConfig,
    params: HypernetParams,
    tau: f64,
    decay_active: bool,
    param_adam: Vec<AdamState>,
    tau_adam: AdamState,
    /// Frozen output alignment used while fine-tuning a swapped pool.
    out_map: Option<ColumnAffine>,
    rng: Rng,
}

impl<'a> Session<'a> {
    fn new(config: &'a TrainConfig, params: HypernetParams, tau: f64, decay_active: bool, rng: Rng) -> Self {
        let param_adam = params.slices().iter().map(|s| AdamState::new(s.len(), config.adam())).collect();
        Session {
            config,
            params,
            tau,
            decay_active,
            param_adam,
            tau_adam: AdamState::new(1, config.adam()),
            out_map: None,
            rng,
        }
    }

    fn selector(&self) -> Selector {
        match self.config.mode {
            AblationMode::Hard => Selector::TopK { k: self.config.hard_k },
            _ => Selector::Sparsemax { tau: self.tau },
        }
    }

    fn tau_learnable(&self) -> bool {
        self.config.mode == AblationMode::Full && !self.decay_active
    }

    fn dense(&self, t: &Matrix) -> Result<Matrix> {
        let h = hypernet_forward(&self.params, t)?.output;
        match &self.out_map {
            Some(map) => map.apply(&h),
            None => Ok(h),
        }
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let size = self.config.batch_size.max(1);
        if n <= size {
            return vec![(0..n).collect()];
        }
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);
        order.chunks(size).map(|c| c.to_vec()).collect()
    }

    fn epoch(&mut self, epoch: usize, t: &Matrix, data: &HeadData) -> Result<TrainRecord> {
        let tau_used = self.tau;
        let decay_used = self.decay_active;
        let n = data.labels.len();
        let batches = self.batches(n);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let mut last_nec = 0.0;
        for idx in &batches {
            let (values, labels): (Matrix, Vec<usize>) = if batches.len() == 1 {
                (data.values.clone(), data.labels.to_vec())
            } else {
                (data.values.select_rows(idx), idx.iter().map(|&i| data.labels[i]).collect())
            };
            // W depends only on the pool and the parameters, not on the samples
            let fwd = hypernet_forward(&self.params, t)?;
            let dense = match &self.out_map {
                Some(map) => map.apply(&fwd.output)?,
                None => fwd.output.clone(),
            };
            let (w, ctx) = select(&dense, self.selector())?;
            last_nec = nec(&w);
            let logits = matmul(&values, &w)?;
            let (loss, d_logits) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(FcbmError::Numeric(format!("loss became non-finite at epoch {epoch}")));
            }
            loss_sum += loss * labels.len() as f64;
            hits += (0..labels.len()).filter(|&i| argmax(logits.row(i)) == labels[i]).count();

            let d_w = matmul_tn(&values, &d_logits)?;
            let (d_dense, d_tau) = select_backward(&ctx, &d_w)?;
            let d_h = match &self.out_map {
                Some(map) => map.backward(&d_dense),
                None => d_dense,
            };
            let grads = hypernet_backward(&self.params, &fwd, &d_h, false)?;
            for ((p, g), st) in self
                .params
                .slices_mut()
                .into_iter()
                .zip(grads.params.slices())
                .zip(self.param_adam.iter_mut())
            {
                st.step(p, g)?;
            }
            // during decay the temperature gradient is computed but discarded
            if self.tau_learnable() {
                let mut t = [self.tau];
                self.tau_adam.step(&mut t, &[d_tau])?;
                self.tau = t[0].max(TAU_MIN);
            }
            if !self.params.slices().iter().all(|s| s.iter().all(|x| x.is_finite())) {
                return Err(FcbmError::Numeric(format!(
                    "hypernetwork parameters became non-finite at epoch {epoch}"
                )));
            }
        }
        if self.config.mode != AblationMode::Hard {
            let (tau, active) = temperature_schedule_step(self.tau, self.config, last_nec, self.decay_active);
            self.tau = tau;
            self.decay_active = active;
        }
        debug_assert!(self.tau > 0.0);
        Ok(TrainRecord {
            epoch,
            loss: loss_sum / n.max(1) as f64,
            acc: hits as f64 / n.max(1) as f64,
            nec: last_nec,
            tau: tau_used,
            decay_active: decay_used,
        })
    }

    /// Runs `epochs` epochs; on a numeric failure, returns the log so far and the diagnostic.
    fn run(&mut self, epochs: usize, t: &Matrix, data: &HeadData, log: &mut TrainLog) -> Option<String> {
        for epoch in 0..epochs {
            let snapshot = (self.params.clone(), self.tau, self.decay_active);
            match self.epoch(epoch, t, data) {
                Ok(rec) => log.records.push(rec),
                Err(e) => {
                    (self.params, self.tau, self.decay_active) = snapshot;
                    return Some(format!("epoch {epoch}: {e}"));
                }
            }
        }
        None
    }
}

/// Trains the hypernetwork head on `concepts` from scratch.
pub fn train_head(
    data: &HeadData,
    concepts: &ConceptSet,
    value_stats: ConceptValueStats,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    data.check(concepts.len())?;
    if value_stats.len() != concepts.len() {
        return Err(dim_err!("value stats cover {} concepts, pool has {}", value_stats.len(), concepts.len()));
    }
    let t = concepts.embeddings();
    let mut init_rng = Rng::derive(config.seed, "hypernet");
    let params = HypernetParams::init(t.cols(), config.hidden, data.num_classes, &mut init_rng);
    let h0 = hypernet_forward(&params, t)?.output;
    let tau0 = initial_temperature(&h0, config.tau0)?;
    let decay_active = config.mode != AblationMode::Hard;

    let mut session = Session::new(config, params, tau0, decay_active, Rng::derive(config.seed, "batches"));
    let mut log = TrainLog::default();
    let aborted = session.run(config.epochs, t, data, &mut log);

    let params = session.params.round_to_f32();
    let h = hypernet_forward(&params, t)?.output;
    let alignment = compute_alignment_stats(t, &h)?.round_to_f32();
    let (w, _) = select(&h, session.selector())?;
    let checkpoint = HeadCheckpoint {
        hypernet: params,
        tau: session.tau,
        alignment,
        value_stats: value_stats.round_to_f32(),
        weights: w.round_to_f32(),
        concepts: concepts.names().to_vec(),
        fingerprint: concepts.fingerprint(),
        config: config.clone(),
        adam: config.adam(),
        decay_active: session.decay_active,
        finetuned: false,
        projector: None,
    };
    Ok(TrainOutcome { checkpoint, log, aborted })
}

/// Adapts a trained head to a new concept pool.
///
/// The new embeddings are aligned to the stored input statistics and the
/// output alignment computed at the start is held fixed while the head
/// trains. Afterwards the stored output statistics are replaced by those of
/// the fine-tuned (aligned) outputs, so swap-mode inference on the new pool
/// reproduces the fine-tuned weights exactly.
pub fn finetune(
    ckpt: &HeadCheckpoint,
    new_concepts: &ConceptSet,
    data: &HeadData,
    new_value_stats: ConceptValueStats,
    epochs: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    ckpt.validate()?;
    data.check(new_concepts.len())?;
    if data.num_classes != ckpt.num_classes() {
        return Err(dim_err!("{} classes in data, head has {}", data.num_classes, ckpt.num_classes()));
    }
    if new_value_stats.len() != new_concepts.len() {
        return Err(dim_err!(
            "value stats cover {} concepts, new pool has {}",
            new_value_stats.len(),
            new_concepts.len()
        ));
    }
    let t_aligned = align_inputs(new_concepts.embeddings(), &ckpt.alignment)?.values;
    let h_start = hypernet_forward(&ckpt.hypernet, &t_aligned)?.output;
    let out_map = output_alignment(&h_start, &ckpt.alignment)?;

    let mut session = Session::new(
        config,
        ckpt.hypernet.clone(),
        ckpt.tau,
        ckpt.decay_active,
        Rng::derive(config.seed, "finetune"),
    );
    session.out_map = Some(out_map);
    let mut log = TrainLog::default();
    let aborted = session.run(epochs, &t_aligned, data, &mut log);

    session.params = session.params.round_to_f32();
    let dense = session.dense(&t_aligned)?;
    let (output_mean, output_std) = column_mean_std(&dense, STD_FLOOR);
    let mut alignment = ckpt.alignment.clone();
    alignment.output_mean = output_mean;
    alignment.output_std = output_std;
    let alignment = alignment.round_to_f32();
    let (w, _) = select(&dense, session.selector())?;

    let checkpoint = HeadCheckpoint {
        hypernet: session.params,
        tau: session.tau,
        alignment,
        value_stats: new_value_stats.round_to_f32(),
        weights: w.round_to_f32(),
        concepts: new_concepts.names().to_vec(),
        fingerprint: new_concepts.fingerprint(),
        config: config.clone(),
        adam: config.adam(),
        decay_active: session.decay_active,
        finetuned: true,
        projector: ckpt.projector.clone(),
    };
    Ok(TrainOutcome { checkpoint, log, aborted })
}

/// Accuracy and NEC of `weights` on standardized values.
pub fn evaluate(values: &Matrix, labels: &[usize], weights: &Matrix) -> Result<(f64, f64)> {
    let logits = crate::hypernet::head_logits(values, weights)?;
    Ok((accuracy(&logits, labels), nec(weights)))
}
