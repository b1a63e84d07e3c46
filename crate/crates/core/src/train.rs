//! Loss assembly, AdamW, the training loop and the evaluation harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::cvae::{cvae_loss, sample_standard_normal, DEFAULT_LAMBDA};
use crate::data::SequenceRecord;
use crate::error::{BotError, Result};
use crate::geometry::{decode_point, gaussian_heatmap, sample_trajectory, Point2D, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::metrics::{ade, auc_j, downsample_heatmap, fde, nss, sim, MetricsReport, HOTSPOT_GRID};
use crate::model::{encode_sample, BotModel, JointMode, ModelConfig, SampleInput, SampleTarget};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// rng stream ids; evaluation uses `2i` / `2i + 1` per sequence from a separate seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub phi: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch: 8,
            epochs: 30,
            phi: 1.0,
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            samples: 20,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 3e-5,
            batch: 40,
            epochs: 100,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(BotError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(BotError::Config("batch and epochs must be positive".into()));
        }
        if self.samples == 0 {
            return Err(BotError::Config("K samples must be >= 1".into()));
        }
        if !(self.phi >= 0.0 && self.lambda >= 0.0 && self.alpha >= 0.0 && self.beta > 0.0) {
            return Err(BotError::Config("phi, lambda, alpha must be >= 0 and beta > 0".into()));
        }
        Ok(())
    }
}

/// `L_h`: mean over steps of the per-hand mean squared heatmap error, averaged over present hands.
pub fn trajectory_loss(t: &mut Tape, pred: &[Var], gt: &[Tensor], present: &[bool]) -> Result<Var> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(BotError::Shape(format!("{} predicted vs {} target heatmaps", pred.len(), gt.len())));
    }
    let hands = present.len();
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present == 0 {
        return Err(BotError::Empty("no present hand".into()));
    }
    let mut terms = Vec::with_capacity(pred.len() * hands);
    for (&p, g) in pred.iter().zip(gt) {
        if t.shape(p) != g.shape() || g.cols() != hands {
            return Err(BotError::Shape(format!("heatmap {:?} vs target {:?}", t.shape(p), g.shape())));
        }
        let g = t.constant(g.clone());
        if n_present == hands {
            // the full mean already averages over hands
            let m = t.mse(p, g)?;
            terms.push(t.scale(m, hands as f64));
        } else {
            for h in (0..hands).filter(|&h| present[h]) {
                let ph = t.slice_cols(p, h, 1)?;
                let gh = t.slice_cols(g, h, 1)?;
                terms.push(t.mse(ph, gh)?);
            }
        }
    }
    let all = t.concat_cols(&terms)?;
    let s = t.sum(all);
    Ok(t.scale(s, 1.0 / (pred.len() * n_present) as f64))
}

/// `L = L_h + phi * L_o`.
pub fn total_loss(t: &mut Tape, l_h: Var, l_o: Var, phi: f64) -> Result<Var> {
    for (name, v) in [("L_h", l_h), ("L_o", l_o)] {
        if !t.scalar(v).is_finite() {
            return Err(BotError::NonFinite(format!("{name} = {}", t.scalar(v))));
        }
    }
    if !phi.is_finite() {
        return Err(BotError::NonFinite(format!("phi = {phi}")));
    }
    let w = t.scale(l_o, phi);
    t.add(l_h, w)
}

/// Loss vars for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l_h: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Full training objective for one sequence, with C-VAE noise `eps`.
pub fn sequence_loss(
    t: &mut Tape,
    model: &BotModel,
    input: &SampleInput,
    target: &SampleTarget,
    eps: Tensor,
    phi: f64,
    lambda: f64,
) -> Result<LossVars> {
    let out = model.forward(t, input)?;
    let l_h = trajectory_loss(t, &out.traj_heatmaps, &target.traj, &target.present)?;
    let gamma = t.constant(target.contact.clone());
    let cv = model.cvae.forward(t, gamma, out.cond, eps)?;
    let lo = cvae_loss(t, gamma, cv.gamma_hat, &cv.latent, lambda, Some(&target.contact_mask))?;
    for (name, v) in [("L_h", l_h), ("L_recon", lo.recon), ("L_kl", lo.kl)] {
        if !t.scalar(v).is_finite() {
            return Err(BotError::NonFinite(format!("{name} = {}", t.scalar(v))));
        }
    }
    let total = total_loss(t, l_h, lo.total, phi)?;
    Ok(LossVars { total, l_h, recon: lo.recon, kl: lo.kl })
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies `grads`, indexed like `store`.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            }
        }
    }
}

/// One optimizer step's mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub l_h: f64,
    pub l_recon: f64,
    pub l_kl: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,L_h,L_recon,L_kl\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.step, r.loss, r.l_h, r.l_recon, r.l_kl
        ));
    }
    s
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRow>,
}

/// Encodes every record for `cfg`, failing on the first incompatible one.
pub fn encode_dataset(data: &[SequenceRecord], cfg: &ModelConfig) -> Result<Vec<(SampleInput, SampleTarget)>> {
    data.iter().map(|r| encode_sample(r, cfg)).collect()
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(data: &[SequenceRecord], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(BotError::Empty("training set is empty".into()));
    }
    let samples = encode_dataset(data, model_cfg)?;
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    init.set_stream(STREAM_INIT);
    let mut store = ParameterStore::new();
    let model = BotModel::new(model_cfg.clone(), &mut store, &mut init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_TRAIN);
    let mut opt = AdamW::new(&store);
    let mut grads: Vec<Tensor> = store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let mut row = LossRow { step, loss: 0.0, l_h: 0.0, l_recon: 0.0, l_kl: 0.0 };
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (inp, tgt) = &samples[i];
                let eps = model.cvae.sample_eps(&mut rng);
                let mut t = Tape::new(&store);
                let lv = sequence_loss(&mut t, &model, inp, tgt, eps, cfg.phi, cfg.lambda)
                    .map_err(|e| match e {
                        BotError::NonFinite(m) => BotError::NonFinite(format!("{m} at step {step}, sequence {}", data[i].id)),
                        other => other,
                    })?;
                row.loss += inv * t.scalar(lv.total);
                row.l_h += inv * t.scalar(lv.l_h);
                row.l_recon += inv * t.scalar(lv.recon);
                row.l_kl += inv * t.scalar(lv.kl);
                let scaled = t.scale(lv.total, inv);
                t.backward_accumulate(scaled, &mut grads)?;
            }
            opt.step(&mut store, &grads, cfg.lr);
            if let Some(id) = store.ids().find(|&id| !store.value(id).is_finite()) {
                return Err(BotError::NonFinite(format!(
                    "parameter `{}` after step {step}",
                    store.name(id)
                )));
            }
            epoch_loss += row.loss * batch.len() as f64;
            curve.push(row);
            step += 1;
        }
        log::info!(
            "epoch {}/{} mean loss {:.6}",
            epoch + 1,
            cfg.epochs,
            epoch_loss / samples.len() as f64
        );
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_store(model_cfg, cfg, step, &rng, &store),
        curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub samples: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub threads: usize,
}

impl EvalOptions {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            samples: cfg.samples,
            alpha: cfg.alpha,
            beta: cfg.beta,
            seed: cfg.seed,
            threads: 1,
        }
    }
}

/// Network outputs for one sequence, reused across sampling settings.
#[derive(Debug, Clone)]
pub struct PreparedSequence {
    pub id: String,
    pub present: Vec<bool>,
    pub observed: Vec<Point2D>,
    pub decoded: Vec<Vec<Point2D>>,
    /// Per C-VAE draw, per hand.
    pub contacts: Vec<Vec<Point2D>>,
    pub gt_future: Vec<Vec<Point2D>>,
    pub sim: f64,
    pub auc_j: f64,
    pub nss: f64,
}

/// Per-sequence results; `ade[k]` and `fde[k]` belong to sample `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub id: String,
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
    pub static_ade: f64,
    pub static_fde: f64,
    pub sim: f64,
    pub auc_j: f64,
    pub nss: f64,
}

impl SequenceEval {
    pub fn min_ade(&self, k: usize) -> f64 {
        self.ade[..k].iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_fde(&self, k: usize) -> f64 {
        self.fde[..k].iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub static_ade: f64,
    pub static_fde: f64,
    pub sequences: Vec<SequenceEval>,
}

fn eval_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Forward pass, decoded points and `k` C-VAE hotspot draws for one record.
pub fn prepare_sequence(
    store: &ParameterStore,
    model: &BotModel,
    rec: &SequenceRecord,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedSequence> {
    let cfg = &model.cfg;
    let (inp, tgt) = encode_sample(rec, cfg)?;
    let mut t = Tape::new(store);
    let out = model.forward(&mut t, &inp)?;
    let hands = cfg.hands;
    let mut decoded = vec![Vec::with_capacity(cfg.horizon - 1); hands];
    for &hm in &out.traj_heatmaps {
        for (h, g) in model.heatmap_grids(&t, hm)?.iter().enumerate() {
            decoded[h].push(decode_point(g)?);
        }
    }
    let mut contacts = Vec::with_capacity(k);
    let mut mean = Tensor::zeros(&[1, hands * cfg.frame_cells()]);
    for _ in 0..k {
        let z = sample_standard_normal(rng, cfg.cvae_latent);
        let g = model.cvae.infer(&mut t, out.cond, z)?;
        let v = t.value(g).clone();
        let grids = model.hotspot_grids(&v)?;
        contacts.push(grids.iter().map(decode_point).collect::<Result<Vec<_>>>()?);
        mean.add_assign(&v);
    }
    mean.scale_assign(1.0 / k as f64);
    let grids = model.hotspot_grids(&mean)?;
    let (fsx, fsy) = cfg.frame_scale();
    let (hr, hc) = (HOTSPOT_GRID.min(cfg.frame_h), HOTSPOT_GRID.min(cfg.frame_w));
    let (mut s, mut a, mut n, mut cnt) = (0.0, 0.0, 0.0, 0.0);
    for (h, g) in grids.iter().enumerate().filter(|(h, _)| tgt.present[*h]) {
        let fix = tgt.contact_points[h];
        let gt = gaussian_heatmap(&fix, cfg.sigma_hotspot, cfg.frame_h, cfg.frame_w, fsx, fsy)?;
        let pd = downsample_heatmap(g, hr, hc)?;
        let gd = downsample_heatmap(&gt, hr, hc)?;
        s += sim(&pd, &gd)?;
        a += auc_j(&pd, &fix)?;
        n += nss(&pd, &fix)?;
        cnt += 1.0;
    }
    Ok(PreparedSequence {
        id: rec.id.clone(),
        observed: inp.last_obs.iter().map(|p| p.unwrap_or(Point2D::new(0.0, 0.0))).collect(),
        present: tgt.present,
        decoded,
        contacts,
        gt_future: tgt.future,
        sim: s / cnt,
        auc_j: a / cnt,
        nss: n / cnt,
    })
}

/// ADE/FDE of `k` sampled trajectories, one per C-VAE draw (cycled if fewer).
pub fn sample_errors(
    p: &PreparedSequence,
    k: usize,
    alpha: f64,
    beta: f64,
    w: f64,
    l: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ades = Vec::with_capacity(k);
    let mut fdes = Vec::with_capacity(k);
    for j in 0..k {
        let contact = &p.contacts[j % p.contacts.len()];
        let pred: Vec<Vec<Point2D>> = (0..p.decoded.len())
            .map(|h| sample_trajectory(&p.decoded[h], &contact[h], &p.observed[h], alpha, beta, w, l, rng))
            .collect();
        ades.push(ade(&pred, &p.gt_future, &p.present, w, l)?);
        fdes.push(fde(&pred, &p.gt_future, &p.present, w, l)?);
    }
    Ok((ades, fdes))
}

fn static_errors(p: &PreparedSequence, w: f64, l: f64) -> Result<(f64, f64)> {
    let pred: Vec<Vec<Point2D>> = p
        .observed
        .iter()
        .zip(&p.gt_future)
        .map(|(o, g)| vec![*o; g.len()])
        .collect();
    Ok((ade(&pred, &p.gt_future, &p.present, w, l)?, fde(&pred, &p.gt_future, &p.present, w, l)?))
}

fn eval_one(
    store: &ParameterStore,
    model: &BotModel,
    rec: &SequenceRecord,
    index: usize,
    opts: &EvalOptions,
) -> Result<SequenceEval> {
    let (w, l) = (model.cfg.image_w as f64, model.cfg.image_h as f64);
    let mut crng = eval_rng(opts.seed, 2 * index as u64);
    let mut trng = eval_rng(opts.seed, 2 * index as u64 + 1);
    let p = prepare_sequence(store, model, rec, opts.samples, &mut crng)?;
    let (ade, fde) = sample_errors(&p, opts.samples, opts.alpha, opts.beta, w, l, &mut trng)?;
    let (static_ade, static_fde) = static_errors(&p, w, l)?;
    Ok(SequenceEval {
        id: p.id,
        ade,
        fde,
        static_ade,
        static_fde,
        sim: p.sim,
        auc_j: p.auc_j,
        nss: p.nss,
    })
}

/// Runs `f` over `0..n`, split across `threads` workers; output order is by index.
fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_model(
    store: &ParameterStore,
    model: &BotModel,
    data: &[SequenceRecord],
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(BotError::Empty("evaluation set is empty".into()));
    }
    if opts.samples == 0 {
        return Err(BotError::Config("K samples must be >= 1".into()));
    }
    let sequences = par_map(data.len(), opts.threads, |i| eval_one(store, model, &data[i], i, opts))?;
    let n = sequences.len() as f64;
    let mean = |f: &dyn Fn(&SequenceEval) -> f64| sequences.iter().map(f).sum::<f64>() / n;
    let k = opts.samples;
    Ok(Evaluation {
        report: MetricsReport {
            ade: mean(&|s| s.min_ade(k)),
            fde: mean(&|s| s.min_fde(k)),
            sim: mean(&|s| s.sim),
            auc_j: mean(&|s| s.auc_j),
            nss: mean(&|s| s.nss),
            k,
            n: sequences.len(),
        },
        static_ade: mean(&|s| s.static_ade),
        static_fde: mean(&|s| s.static_fde),
        sequences,
    })
}

pub fn evaluate_detailed(ckpt: &Checkpoint, data: &[SequenceRecord], opts: &EvalOptions) -> Result<Evaluation> {
    let (store, model) = ckpt.build_model()?;
    evaluate_model(&store, &model, data, opts)
}

/// Min-of-K ADE/FDE and hotspot metrics averaged over `data`.
pub fn evaluate(ckpt: &Checkpoint, data: &[SequenceRecord], opts: &EvalOptions) -> Result<MetricsReport> {
    Ok(evaluate_detailed(ckpt, data, opts)?.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: JointMode,
    pub report: MetricsReport,
    pub static_ade: f64,
}

/// Parses a comma-separated mode list.
pub fn parse_modes(s: &str) -> Result<Vec<JointMode>> {
    let modes: Vec<JointMode> = s.split(',').filter(|m| !m.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if modes.is_empty() {
        return Err(BotError::Config("no modes given".into()));
    }
    Ok(modes)
}

/// Trains and evaluates one model per mode on shared data and seed.
pub fn run_ablation(
    train_data: &[SequenceRecord],
    eval_data: &[SequenceRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    modes: &[JointMode],
    opts: &EvalOptions,
) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&mode| {
            log::info!("ablation: training `{mode}`");
            let mc = ModelConfig { joint_mode: mode, ..model_cfg.clone() };
            let out = train(train_data, &mc, cfg)?;
            let ev = evaluate_detailed(&out.checkpoint, eval_data, opts)?;
            Ok(AblationRow { mode, report: ev.report, static_ade: ev.static_ade })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub ade: f64,
    pub fde: f64,
}

/// Min-of-K ADE/FDE over the `alphas x betas` grid, reusing one forward pass
/// per sequence. Each cell reseeds the trajectory streams, so cells are
/// comparable and an `alpha = 0` row matches deterministic evaluation.
pub fn sweep_uncertainty(
    ckpt: &Checkpoint,
    data: &[SequenceRecord],
    alphas: &[f64],
    betas: &[f64],
    samples: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(BotError::Empty("sweep needs at least one alpha and one beta".into()));
    }
    if data.is_empty() || samples == 0 {
        return Err(BotError::Empty("sweep needs data and K >= 1".into()));
    }
    let (store, model) = ckpt.build_model()?;
    let (w, l) = (model.cfg.image_w as f64, model.cfg.image_h as f64);
    let prepared = par_map(data.len(), threads, |i| {
        let mut crng = eval_rng(seed, 2 * i as u64);
        prepare_sequence(&store, &model, &data[i], samples, &mut crng)
    })?;
    let mut rows = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let errs = par_map(prepared.len(), threads, |i| {
                let mut trng = eval_rng(seed, 2 * i as u64 + 1);
                sample_errors(&prepared[i], samples, alpha, beta, w, l, &mut trng)
            })?;
            let n = errs.len() as f64;
            let min = |v: &Vec<f64>| v.iter().copied().fold(f64::INFINITY, f64::min);
            rows.push(SweepRow {
                alpha,
                beta,
                ade: errs.iter().map(|(a, _)| min(a)).sum::<f64>() / n,
                fde: errs.iter().map(|(_, f)| min(f)).sum::<f64>() / n,
            });
        }
    }
    Ok(rows)
}
