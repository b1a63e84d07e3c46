//! The joint forecasting network: toy spatial/temporal encoders, the
//! spatial-temporal reconstruction stack, trajectory and contact branches,
//! mutual refinement between them, and per-hand heatmap heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cvae::{Cvae, CvaeConfig};
use crate::data::{frame_difference, SequenceRecord};
use crate::error::{BotError, Result};
use crate::geometry::{decode_point, gaussian_heatmap, HeatmapGrid, Point2D};
use crate::nn::{BlockConfig, CrossTransformer, FeedForward, GridDims, LayerNorm, Linear, OverlapPatchEmbed, TokenSequence};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    Individual,
    Hand,
    Object,
    Bidirectional,
    Biprogressive,
}

impl JointMode {
    pub const ALL: [JointMode; 5] = [
        JointMode::Individual,
        JointMode::Hand,
        JointMode::Object,
        JointMode::Bidirectional,
        JointMode::Biprogressive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JointMode::Individual => "individual",
            JointMode::Hand => "hand",
            JointMode::Object => "object",
            JointMode::Bidirectional => "bidirectional",
            JointMode::Biprogressive => "biprogressive",
        }
    }

    fn refines_contact(self) -> bool {
        matches!(self, JointMode::Hand | JointMode::Bidirectional | JointMode::Biprogressive)
    }

    fn refines_traj(self) -> bool {
        matches!(self, JointMode::Object | JointMode::Bidirectional | JointMode::Biprogressive)
    }
}

impl fmt::Display for JointMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JointMode {
    type Err = BotError;

    fn from_str(s: &str) -> Result<Self> {
        JointMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| BotError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    Feature,
    FeaturePlusHeatmap,
}

impl FromStr for ConditionMode {
    type Err = BotError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "feature" => Ok(ConditionMode::Feature),
            "feature_plus_heatmap" => Ok(ConditionMode::FeaturePlusHeatmap),
            other => Err(BotError::Config(format!("unknown condition mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchSpec {
    fn out(&self, n: usize) -> Option<usize> {
        (n + 2 * self.pad).checked_sub(self.kernel).map(|v| v / self.stride + 1)
    }

    fn grid(&self, g: GridDims) -> Result<GridDims> {
        match (self.out(g.rows), self.out(g.cols)) {
            (Some(r), Some(c)) => Ok(GridDims::new(r, c)),
            _ => Err(BotError::Config(format!("patch {self:?} too large for {g:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_w: usize,
    pub image_h: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    pub n_obs: usize,
    pub horizon: usize,
    pub hands: usize,
    pub embed: PatchSpec,
    /// Mean-pool factor applied to temporal tokens.
    pub temporal_pool: usize,
    pub contact_embed: PatchSpec,
    pub recon: BlockConfig,
    pub branch: BlockConfig,
    pub cvae_hidden: usize,
    pub cvae_latent: usize,
    pub condition_mode: ConditionMode,
    pub joint_mode: JointMode,
    /// Ground-truth trajectory heatmap spread, in token-grid cells.
    pub sigma_traj: f64,
    /// Ground-truth hotspot spread, in frame cells.
    pub sigma_hotspot: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_w: 456,
            image_h: 256,
            frame_w: 57,
            frame_h: 32,
            n_obs: 8,
            horizon: 5,
            hands: 2,
            embed: PatchSpec { kernel: 7, stride: 4, pad: 3 },
            temporal_pool: 2,
            contact_embed: PatchSpec { kernel: 3, stride: 2, pad: 1 },
            recon: BlockConfig { model_dim: 64, heads: 4, ffn_ratio: 2, depth: 2 },
            branch: BlockConfig { model_dim: 32, heads: 4, ffn_ratio: 2, depth: 1 },
            cvae_hidden: 128,
            cvae_latent: 64,
            condition_mode: ConditionMode::FeaturePlusHeatmap,
            joint_mode: JointMode::Biprogressive,
            sigma_traj: 1.0,
            sigma_hotspot: 2.0,
        }
    }

    /// Full-size dimensions; valid but far too slow for CPU tests.
    pub fn paper() -> Self {
        Self {
            frame_w: 114,
            frame_h: 64,
            temporal_pool: 1,
            recon: BlockConfig { model_dim: 1024, heads: 8, ffn_ratio: 4, depth: 6 },
            branch: BlockConfig { model_dim: 256, heads: 8, ffn_ratio: 4, depth: 2 },
            cvae_hidden: 1024,
            cvae_latent: 2048,
            sigma_traj: 1.0,
            sigma_hotspot: 3.0,
            ..Self::desk()
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_w: 64,
            image_h: 64,
            frame_w: 16,
            frame_h: 16,
            n_obs: 3,
            recon: BlockConfig { model_dim: 16, heads: 2, ffn_ratio: 2, depth: 1 },
            branch: BlockConfig { model_dim: 8, heads: 2, ffn_ratio: 2, depth: 1 },
            cvae_hidden: 8,
            cvae_latent: 4,
            sigma_hotspot: 1.5,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(BotError::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 3 {
            return Err(BotError::Config(format!("horizon T must be >= 3, got {}", self.horizon)));
        }
        if !(1..=2).contains(&self.hands) {
            return Err(BotError::Config(format!("hands must be 1 or 2, got {}", self.hands)));
        }
        if self.n_obs < 2 {
            return Err(BotError::Config("n_obs must be >= 2".into()));
        }
        if self.temporal_pool == 0 {
            return Err(BotError::Config("temporal_pool must be >= 1".into()));
        }
        if !(self.sigma_traj > 0.0 && self.sigma_hotspot > 0.0) {
            return Err(BotError::Config("heatmap sigmas must be positive".into()));
        }
        self.recon.validate()?;
        self.branch.validate()?;
        self.token_grid()?;
        self.contact_grid()?;
        Ok(())
    }

    pub fn frame_grid(&self) -> GridDims {
        GridDims::new(self.frame_h, self.frame_w)
    }

    pub fn token_grid(&self) -> Result<GridDims> {
        self.embed.grid(self.frame_grid())
    }

    pub fn temporal_grid(&self) -> Result<GridDims> {
        let g = self.token_grid()?;
        let p = self.temporal_pool;
        Ok(GridDims::new(g.rows.div_ceil(p), g.cols.div_ceil(p)))
    }

    pub fn contact_grid(&self) -> Result<GridDims> {
        self.contact_embed.grid(self.token_grid()?)
    }

    /// Image pixels per token-grid cell.
    pub fn token_scale(&self) -> Result<(f64, f64)> {
        let g = self.token_grid()?;
        Ok((self.image_w as f64 / g.cols as f64, self.image_h as f64 / g.rows as f64))
    }

    /// Image pixels per frame cell.
    pub fn frame_scale(&self) -> (f64, f64) {
        (self.image_w as f64 / self.frame_w as f64, self.image_h as f64 / self.frame_h as f64)
    }

    pub fn frame_cells(&self) -> usize {
        self.frame_w * self.frame_h
    }

    pub fn cvae_config(&self) -> Result<CvaeConfig> {
        Ok(CvaeConfig {
            input_dim: self.hands * self.frame_cells(),
            cond_dim: self.contact_grid()?.cells() * self.branch.model_dim,
            hidden: self.cvae_hidden,
            latent: self.cvae_latent,
        })
    }

    /// Record hand index (0 = left, 1 = right) for each model hand channel.
    pub fn hand_slots(&self) -> &'static [usize] {
        if self.hands == 2 {
            &[0, 1]
        } else {
            &[1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepTag {
    /// The last observed frame, step N.
    Observed,
    /// Future step `N + i`, `i` in `1..T`.
    Future(usize),
    /// Contact step after `refinements` mutual-refinement rounds.
    Contact { refinements: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub tokens: Var,
    pub grid: GridDims,
    pub tag: StepTag,
}

#[derive(Debug, Clone)]
pub struct ReconstructionOutput {
    pub trajectory: Vec<FeatureMap>,
    pub contact: FeatureMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refinement {
    Contact { index: usize },
    Trajectory { step: usize },
}

#[derive(Debug, Clone)]
pub struct Enhanced {
    pub trajectory: Vec<FeatureMap>,
    pub contact: FeatureMap,
    pub trace: Vec<Refinement>,
}

/// Per-sequence network input.
#[derive(Debug, Clone)]
pub struct SampleInput {
    /// `frame_cells x 1`.
    pub last_frame: Tensor,
    /// `frame_cells x (n_obs - 1)` absolute frame differences.
    pub diffs: Tensor,
    /// Last observed position per model hand, `None` when the hand is absent.
    pub last_obs: Vec<Option<Point2D>>,
}

/// Per-sequence supervision.
#[derive(Debug, Clone)]
pub struct SampleTarget {
    /// `T - 1` maps of `token_cells x hands`.
    pub traj: Vec<Tensor>,
    /// `1 x (hands * frame_cells)`, hand-major.
    pub contact: Tensor,
    /// Ones over the present hands' cells of `contact`.
    pub contact_mask: Tensor,
    pub present: Vec<bool>,
    pub future: Vec<Vec<Point2D>>,
    pub contact_points: Vec<Point2D>,
}

pub struct ForwardOutput {
    /// `T - 1` heatmap logits passed through softplus, `token_cells x hands`.
    pub traj_heatmaps: Vec<Var>,
    pub contact: FeatureMap,
    /// Flattened refined contact feature, `1 x cond_dim`.
    pub cond: Var,
    pub trace: Vec<Refinement>,
}

pub struct BotModel {
    pub cfg: ModelConfig,
    spatial_embed: OverlapPatchEmbed,
    temporal_embed: OverlapPatchEmbed,
    s_pos: ParamId,
    x_pos: ParamId,
    recon: CrossTransformer,
    step_proj: Linear,
    step_emb: Vec<ParamId>,
    step_ln: LayerNorm,
    step_ffn: FeedForward,
    traj_block: CrossTransformer,
    hm_proj: Option<Linear>,
    contact_embed: OverlapPatchEmbed,
    refine_contact: Option<CrossTransformer>,
    refine_traj: Option<CrossTransformer>,
    head: Linear,
    pub cvae: Cvae,
    pool: Tensor,
}

pub const ENHANCE_PREFIX: &str = "enhance.";

impl BotModel {
    /// Registers every parameter in `store` in a fixed order.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, store: &mut ParameterStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (dr, db) = (cfg.recon.model_dim, cfg.branch.model_dim);
        let tok = cfg.token_grid()?;
        let tgrid = cfg.temporal_grid()?;
        let e = cfg.embed;
        let spatial_embed = OverlapPatchEmbed::new(store, rng, "enc.spatial", 1, dr, e.kernel, e.stride, e.pad)?;
        let temporal_embed =
            OverlapPatchEmbed::new(store, rng, "enc.temporal", cfg.n_obs - 1, dr, e.kernel, e.stride, e.pad)?;
        let s_pos = store.register_uniform("pos.s", &[tok.cells(), dr], dr, rng)?;
        let x_pos = store.register_uniform("pos.x", &[tgrid.cells(), dr], dr, rng)?;
        let recon = CrossTransformer::new(store, rng, "recon", &cfg.recon)?;
        let step_proj = Linear::new(store, rng, "step.proj", dr, db, true)?;
        let step_emb = (0..cfg.horizon)
            .map(|k| store.register_uniform(format!("step.emb.{k}"), &[db], db, rng))
            .collect::<Result<_>>()?;
        let step_ln = LayerNorm::new(store, "step.ln", db)?;
        let step_ffn = FeedForward::new(store, rng, "step.ffn", db, cfg.branch.ffn_ratio)?;
        let traj_block = CrossTransformer::new(store, rng, "traj.f", &cfg.branch)?;
        let hm_proj = match cfg.condition_mode {
            ConditionMode::FeaturePlusHeatmap => Some(Linear::new(store, rng, "traj.hm_proj", cfg.hands, db, true)?),
            ConditionMode::Feature => None,
        };
        let c = cfg.contact_embed;
        let contact_embed = OverlapPatchEmbed::new(store, rng, "contact.embed", db, db, c.kernel, c.stride, c.pad)?;
        let refine_contact = if cfg.joint_mode.refines_contact() {
            Some(CrossTransformer::new(store, rng, "enhance.contact", &cfg.branch)?)
        } else {
            None
        };
        let refine_traj = if cfg.joint_mode.refines_traj() {
            Some(CrossTransformer::new(store, rng, "enhance.traj", &cfg.branch)?)
        } else {
            None
        };
        let head = Linear::new(store, rng, "head", db, cfg.hands, true)?;
        let cvae = Cvae::new(store, rng, "cvae", cfg.cvae_config()?)?;
        let pool = pool_matrix(tok, cfg.temporal_pool);
        debug_assert_eq!(pool.rows(), tgrid.cells());
        Ok(Self {
            cfg,
            spatial_embed,
            temporal_embed,
            s_pos,
            x_pos,
            recon,
            step_proj,
            step_emb,
            step_ln,
            step_ffn,
            traj_block,
            hm_proj,
            contact_embed,
            refine_contact,
            refine_traj,
            head,
            cvae,
            pool,
        })
    }

    /// Spatial tokens from the last frame and pooled temporal tokens from the
    /// frame differences, each with its positional term added.
    pub fn encode_tokens(&self, t: &mut Tape, input: &SampleInput) -> Result<(TokenSequence, TokenSequence)> {
        let fg = self.cfg.frame_grid();
        let cells = fg.cells();
        if input.last_frame.shape() != [cells, 1] || input.diffs.shape() != [cells, self.cfg.n_obs - 1] {
            return Err(BotError::Shape(format!(
                "input frames {:?}/{:?} do not match {}x{} with {} observations",
                input.last_frame.shape(),
                input.diffs.shape(),
                fg.rows,
                fg.cols,
                self.cfg.n_obs
            )));
        }
        let frame = t.constant(input.last_frame.clone());
        let s = self.spatial_embed.forward(t, frame, fg)?;
        let sp = t.param(self.s_pos);
        let spatial = t.add(s.tokens, sp)?;

        let diffs = t.constant(input.diffs.clone());
        let x = self.temporal_embed.forward(t, diffs, fg)?;
        let pool = t.constant(self.pool.clone());
        let pooled = t.matmul(pool, x.tokens)?;
        let xp = t.param(self.x_pos);
        let temporal = t.add(pooled, xp)?;
        Ok((
            TokenSequence { tokens: spatial, grid: s.grid },
            TokenSequence { tokens: temporal, grid: Some(self.cfg.temporal_grid()?) },
        ))
    }

    /// Projection of the spatial tokens into the branch width, the condition for step `N + 1`.
    pub fn observed_feature(&self, t: &mut Tape, spatial: &TokenSequence) -> Result<FeatureMap> {
        let tokens = self.step_proj.forward(t, spatial.tokens)?;
        Ok(FeatureMap {
            tokens,
            grid: self.cfg.token_grid()?,
            tag: StepTag::Observed,
        })
    }

    /// Cross-transformer fusion of spatial (query) and temporal (key/value)
    /// tokens, split into `T - 1` trajectory maps and one contact map.
    pub fn spatial_temporal_reconstruct(
        &self,
        t: &mut Tape,
        spatial: &TokenSequence,
        temporal: &TokenSequence,
    ) -> Result<ReconstructionOutput> {
        let tok = self.cfg.token_grid()?;
        if t.shape(spatial.tokens) != [tok.cells(), self.cfg.recon.model_dim] {
            return Err(BotError::Shape(format!(
                "spatial tokens {:?}, expected [{}, {}]",
                t.shape(spatial.tokens),
                tok.cells(),
                self.cfg.recon.model_dim
            )));
        }
        let fused = self.recon.forward(t, spatial.tokens, temporal.tokens)?;
        let base = self.step_proj.forward(t, fused)?;
        let horizon = self.cfg.horizon;
        let mut maps = Vec::with_capacity(horizon);
        for (k, &emb) in self.step_emb.iter().enumerate() {
            let e = t.param(emb);
            let f = t.add_row(base, e)?;
            let n = self.step_ln.forward(t, f)?;
            let h = self.step_ffn.forward(t, n)?;
            let tokens = t.add(f, h)?;
            let tag = if k + 1 == horizon {
                StepTag::Contact { refinements: 0 }
            } else {
                StepTag::Future(k + 1)
            };
            maps.push(FeatureMap { tokens, grid: tok, tag });
        }
        let contact = maps.pop().unwrap();
        Ok(ReconstructionOutput { trajectory: maps, contact })
    }

    /// `F^o_t = f(F_t, cond)`, optionally with the previous position heatmap
    /// projected into the condition.
    pub fn trajectory_branch_step(
        &self,
        t: &mut Tape,
        f_t: &FeatureMap,
        cond: &FeatureMap,
        prev_points: &[Option<Point2D>],
    ) -> Result<FeatureMap> {
        let StepTag::Future(i) = f_t.tag else {
            return Err(BotError::TagMismatch(format!("branch step on {:?}", f_t.tag)));
        };
        let ok = match cond.tag {
            StepTag::Observed => i == 1,
            StepTag::Future(j) => j + 1 == i,
            StepTag::Contact { .. } => false,
        };
        if !ok {
            return Err(BotError::TagMismatch(format!(
                "condition {:?} does not precede {:?}",
                cond.tag, f_t.tag
            )));
        }
        let kv = match &self.hm_proj {
            Some(proj) => {
                let g = self.position_channels(prev_points)?;
                let g = t.constant(g);
                let p = proj.forward(t, g)?;
                t.add(cond.tokens, p)?
            }
            None => cond.tokens,
        };
        let tokens = self.traj_block.forward(t, f_t.tokens, kv)?;
        Ok(FeatureMap { tokens, grid: f_t.grid, tag: f_t.tag })
    }

    /// Gaussian channel per hand at the given position, zero for absent hands.
    fn position_channels(&self, points: &[Option<Point2D>]) -> Result<Tensor> {
        let tok = self.cfg.token_grid()?;
        let (sx, sy) = self.cfg.token_scale()?;
        let hands = self.cfg.hands;
        if points.len() != hands {
            return Err(BotError::Shape(format!("{} positions for {hands} hands", points.len())));
        }
        let mut out = Tensor::zeros(&[tok.cells(), hands]);
        for (h, p) in points.iter().enumerate() {
            if let Some(p) = p {
                let hm = gaussian_heatmap(p, self.cfg.sigma_traj, tok.rows, tok.cols, sx, sy)?;
                for (i, v) in hm.values().iter().enumerate() {
                    out.data_mut()[i * hands + h] = *v;
                }
            }
        }
        Ok(out)
    }

    /// Chains the branch over `N+1 .. N+T-1`; each step is conditioned on the previous output.
    pub fn trajectory_branch(
        &self,
        t: &mut Tape,
        recon: &ReconstructionOutput,
        observed: &FeatureMap,
        last_obs: &[Option<Point2D>],
    ) -> Result<Vec<FeatureMap>> {
        let mut out: Vec<FeatureMap> = Vec::with_capacity(recon.trajectory.len());
        let mut prev_points = last_obs.to_vec();
        for f_t in &recon.trajectory {
            let cond = out.last().copied().unwrap_or(*observed);
            if self.hm_proj.is_some() && !out.is_empty() {
                let hm = self.decode_heatmaps(t, &cond)?;
                let grids = self.heatmap_grids(t, hm)?;
                for (h, p) in prev_points.iter_mut().enumerate() {
                    if p.is_some() {
                        *p = Some(decode_point(&grids[h])?);
                    }
                }
            }
            out.push(self.trajectory_branch_step(t, f_t, &cond, &prev_points)?);
        }
        Ok(out)
    }

    /// `F^o_C`: overlap patch embedding of the contact map.
    pub fn contact_branch(&self, t: &mut Tape, contact: &FeatureMap) -> Result<FeatureMap> {
        let seq = self.contact_embed.forward(t, contact.tokens, contact.grid)?;
        Ok(FeatureMap {
            tokens: seq.tokens,
            grid: seq.grid.expect("patch embedding yields a grid"),
            tag: StepTag::Contact { refinements: 0 },
        })
    }

    /// Mutual refinement of trajectory and contact features under `mode`.
    pub fn bi_progressive_enhance(
        &self,
        t: &mut Tape,
        traj: &[FeatureMap],
        contact: &FeatureMap,
        mode: JointMode,
    ) -> Result<Enhanced> {
        let n = traj.len();
        if n + 1 != self.cfg.horizon {
            return Err(BotError::Shape(format!(
                "expected {} trajectory maps, got {n}",
                self.cfg.horizon - 1
            )));
        }
        fn need<'a>(b: &'a Option<CrossTransformer>, mode: JointMode, what: &str) -> Result<&'a CrossTransformer> {
            b.as_ref().ok_or_else(|| {
                BotError::Config(format!("mode `{mode}` needs the {what} refinement block, which this model lacks"))
            })
        }
        let mut trace = Vec::new();
        let mut out_traj = traj.to_vec();
        let mut c = *contact;
        let refine = |t: &mut Tape, b: &CrossTransformer, q: &FeatureMap, kv: &FeatureMap, tag: StepTag| {
            b.forward(t, q.tokens, kv.tokens)
                .map(|tokens| FeatureMap { tokens, grid: q.grid, tag })
        };
        match mode {
            JointMode::Individual => {}
            JointMode::Hand => {
                let rc = need(&self.refine_contact, mode, "contact")?;
                c = refine(t, rc, contact, &traj[n - 1], StepTag::Contact { refinements: 1 })?;
                trace.push(Refinement::Contact { index: 1 });
            }
            JointMode::Object => {
                let rt = need(&self.refine_traj, mode, "trajectory")?;
                for (i, f) in traj.iter().enumerate() {
                    out_traj[i] = refine(t, rt, f, contact, f.tag)?;
                    trace.push(Refinement::Trajectory { step: i + 1 });
                }
            }
            JointMode::Bidirectional => {
                let rc = need(&self.refine_contact, mode, "contact")?;
                let rt = need(&self.refine_traj, mode, "trajectory")?;
                c = refine(t, rc, contact, &traj[n - 1], StepTag::Contact { refinements: 1 })?;
                trace.push(Refinement::Contact { index: 1 });
                for (i, f) in traj.iter().enumerate() {
                    out_traj[i] = refine(t, rt, f, contact, f.tag)?;
                    trace.push(Refinement::Trajectory { step: i + 1 });
                }
            }
            JointMode::Biprogressive => {
                let rc = need(&self.refine_contact, mode, "contact")?;
                let rt = need(&self.refine_traj, mode, "trajectory")?;
                for i in 1..n {
                    c = refine(t, rc, &c, &out_traj[i - 1], StepTag::Contact { refinements: i })?;
                    trace.push(Refinement::Contact { index: i });
                    out_traj[i] = refine(t, rt, &traj[i], &c, traj[i].tag)?;
                    trace.push(Refinement::Trajectory { step: i + 1 });
                }
            }
        }
        Ok(Enhanced { trajectory: out_traj, contact: c, trace })
    }

    /// Softplus of a per-token linear map to one channel per hand (`cells x hands`).
    pub fn decode_heatmaps(&self, t: &mut Tape, map: &FeatureMap) -> Result<Var> {
        let logits = self.head.forward(t, map.tokens)?;
        Ok(t.softplus(logits))
    }

    /// Splits a `cells x hands` heatmap variable into per-hand grids in image scale.
    pub fn heatmap_grids(&self, t: &Tape, hm: Var) -> Result<Vec<HeatmapGrid>> {
        let tok = self.cfg.token_grid()?;
        let (sx, sy) = self.cfg.token_scale()?;
        let v = t.value(hm);
        let hands = self.cfg.hands;
        if v.shape() != [tok.cells(), hands] {
            return Err(BotError::Shape(format!("heatmap tensor {:?}", v.shape())));
        }
        (0..hands)
            .map(|h| {
                let vals = (0..tok.cells()).map(|i| v.data()[i * hands + h]).collect();
                HeatmapGrid::new(tok.rows, tok.cols, vals, sx, sy)
            })
            .collect()
    }

    /// Full forward pass up to the trajectory heatmaps and the C-VAE condition.
    pub fn forward(&self, t: &mut Tape, input: &SampleInput) -> Result<ForwardOutput> {
        let (spatial, temporal) = self.encode_tokens(t, input)?;
        let observed = self.observed_feature(t, &spatial)?;
        let recon = self.spatial_temporal_reconstruct(t, &spatial, &temporal)?;
        let traj = self.trajectory_branch(t, &recon, &observed, &input.last_obs)?;
        let contact = self.contact_branch(t, &recon.contact)?;
        let enh = self.bi_progressive_enhance(t, &traj, &contact, self.cfg.joint_mode)?;
        let traj_heatmaps = enh
            .trajectory
            .iter()
            .map(|f| self.decode_heatmaps(t, f))
            .collect::<Result<_>>()?;
        let n = t.value(enh.contact.tokens).len();
        let cond = t.reshape(enh.contact.tokens, &[1, n])?;
        Ok(ForwardOutput {
            traj_heatmaps,
            contact: enh.contact,
            cond,
            trace: enh.trace,
        })
    }

    /// Splits a `1 x (hands * frame_cells)` hotspot into per-hand frame-resolution grids.
    pub fn hotspot_grids(&self, values: &Tensor) -> Result<Vec<HeatmapGrid>> {
        let cells = self.cfg.frame_cells();
        let (sx, sy) = self.cfg.frame_scale();
        if values.len() != cells * self.cfg.hands {
            return Err(BotError::Shape(format!("hotspot tensor {:?}", values.shape())));
        }
        values
            .data()
            .chunks(cells)
            .map(|c| HeatmapGrid::new(self.cfg.frame_h, self.cfg.frame_w, c.to_vec(), sx, sy))
            .collect()
    }
}

/// Averages `p x p` blocks of a token grid (partial blocks at the edges).
fn pool_matrix(g: GridDims, p: usize) -> Tensor {
    let (pr, pc) = (g.rows.div_ceil(p), g.cols.div_ceil(p));
    let mut m = Tensor::zeros(&[pr * pc, g.cells()]);
    for orow in 0..pr {
        for ocol in 0..pc {
            let rows = orow * p..((orow + 1) * p).min(g.rows);
            let cols = ocol * p..((ocol + 1) * p).min(g.cols);
            let w = 1.0 / (rows.len() * cols.len()) as f64;
            for r in rows {
                for c in cols.clone() {
                    m.data_mut()[(orow * pc + ocol) * g.cells() + r * g.cols + c] = w;
                }
            }
        }
    }
    m
}

/// Converts a record into network input and supervision under `cfg`.
pub fn encode_sample(rec: &SequenceRecord, cfg: &ModelConfig) -> Result<(SampleInput, SampleTarget)> {
    if rec.w != cfg.image_w || rec.h != cfg.image_h {
        return Err(BotError::Config(format!(
            "record {} is {}x{}, model expects {}x{}",
            rec.id, rec.w, rec.h, cfg.image_w, cfg.image_h
        )));
    }
    if rec.frame_dims() != (cfg.frame_h, cfg.frame_w) || rec.frames.len() != cfg.n_obs {
        return Err(BotError::Config(format!(
            "record {} has {} frames of {:?}, model expects {} of ({}, {})",
            rec.id,
            rec.frames.len(),
            rec.frame_dims(),
            cfg.n_obs,
            cfg.frame_h,
            cfg.frame_w
        )));
    }
    if rec.future_len() + 1 != cfg.horizon {
        return Err(BotError::Config(format!(
            "record {} has {} future points, horizon {} needs {}",
            rec.id,
            rec.future_len(),
            cfg.horizon,
            cfg.horizon - 1
        )));
    }
    let cells = cfg.frame_cells();
    let last_frame = Tensor::new(&[cells, 1], rec.frames[cfg.n_obs - 1].concat())?;
    let diffs = frame_difference(&rec.frames)?;
    let nd = diffs.len();
    let mut dt = Tensor::zeros(&[cells, nd]);
    for (k, d) in diffs.iter().enumerate() {
        for (i, v) in d.iter().flatten().enumerate() {
            dt.data_mut()[i * nd + k] = *v;
        }
    }

    let slots = cfg.hand_slots();
    let hands = cfg.hands;
    let tracks: Vec<_> = slots.iter().map(|&s| rec.hands.get(s)).collect();
    let present: Vec<bool> = tracks.iter().map(|h| h.present).collect();
    if !present.iter().any(|&p| p) {
        return Err(BotError::Empty(format!("record {} has no present hand for this model", rec.id)));
    }
    let last_obs = tracks
        .iter()
        .map(|h| h.present.then(|| *h.obs.last().unwrap()))
        .collect();

    let tok = cfg.token_grid()?;
    let (tsx, tsy) = cfg.token_scale()?;
    let mut traj = Vec::with_capacity(cfg.horizon - 1);
    for step in 0..cfg.horizon - 1 {
        let mut m = Tensor::zeros(&[tok.cells(), hands]);
        for (h, tr) in tracks.iter().enumerate() {
            if tr.present {
                let g = gaussian_heatmap(&tr.future[step], cfg.sigma_traj, tok.rows, tok.cols, tsx, tsy)?;
                for (i, v) in g.values().iter().enumerate() {
                    m.data_mut()[i * hands + h] = *v;
                }
            }
        }
        traj.push(m);
    }

    let (fsx, fsy) = cfg.frame_scale();
    let mut contact = Tensor::zeros(&[1, hands * cells]);
    let mut mask = Tensor::zeros(&[hands * cells]);
    for (h, tr) in tracks.iter().enumerate() {
        if tr.present {
            let g = gaussian_heatmap(&tr.contact, cfg.sigma_hotspot, cfg.frame_h, cfg.frame_w, fsx, fsy)?;
            contact.data_mut()[h * cells..(h + 1) * cells].copy_from_slice(g.values());
            mask.data_mut()[h * cells..(h + 1) * cells].fill(1.0);
        }
    }
    Ok((
        SampleInput { last_frame, diffs: dt, last_obs },
        SampleTarget {
            traj,
            contact,
            contact_mask: mask,
            present,
            future: tracks.iter().map(|h| h.future.clone()).collect(),
            contact_points: tracks.iter().map(|h| h.contact).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, Category, GeneratorConfig};
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: ModelConfig, seed: u64) -> (ParameterStore, BotModel) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = BotModel::new(cfg, &mut store, &mut rng).unwrap();
        (store, m)
    }

    fn gen_cfg(cfg: &ModelConfig) -> GeneratorConfig {
        GeneratorConfig {
            width: cfg.image_w,
            height: cfg.image_h,
            frame_w: cfg.frame_w,
            frame_h: cfg.frame_h,
            n_obs: cfg.n_obs,
            horizon: cfg.horizon,
            blob_sigma: 4.0,
            ..GeneratorConfig::default()
        }
    }

    fn sample(cfg: &ModelConfig, i: usize) -> (SampleInput, SampleTarget) {
        let (rec, _) = generate_sequence(&gen_cfg(cfg), i, Category::ALL[i % 3]).unwrap();
        encode_sample(&rec, cfg).unwrap()
    }

    #[test]
    fn desk_dims() {
        let c = ModelConfig::desk();
        assert_eq!(c.token_grid().unwrap(), GridDims::new(8, 15));
        assert_eq!(c.temporal_grid().unwrap(), GridDims::new(4, 8));
        assert_eq!(c.contact_grid().unwrap(), GridDims::new(4, 8));
        assert_eq!(c.cvae_config().unwrap().input_dim, 2 * 32 * 57);
        ModelConfig::paper().validate().unwrap();
        assert!(ModelConfig { horizon: 2, ..ModelConfig::tiny() }.validate().is_err());
        assert!(ModelConfig { hands: 3, ..ModelConfig::tiny() }.validate().is_err());
    }

    #[test]
    fn modes_parse() {
        for m in JointMode::ALL {
            assert_eq!(m.as_str().parse::<JointMode>().unwrap(), m);
        }
        assert!(matches!("sideways".parse::<JointMode>(), Err(BotError::UnknownMode(_))));
    }

    #[test]
    fn reconstruct_splits_horizon() {
        let cfg = ModelConfig::tiny();
        let (store, m) = build(cfg.clone(), 1);
        let (inp, _) = sample(&cfg, 0);
        let mut t = Tape::new(&store);
        let (s, x) = m.encode_tokens(&mut t, &inp).unwrap();
        let r = m.spatial_temporal_reconstruct(&mut t, &s, &x).unwrap();
        assert_eq!(r.trajectory.len(), 4);
        for (i, f) in r.trajectory.iter().enumerate() {
            assert_eq!(f.tag, StepTag::Future(i + 1));
        }
        assert_eq!(r.contact.tag, StepTag::Contact { refinements: 0 });
    }

    #[test]
    fn zeroed_reconstruction_returns_projection() {
        let cfg = ModelConfig::tiny();
        let (mut store, m) = build(cfg.clone(), 2);
        for p in ["recon.", "step.emb", "step.ffn"] {
            store.zero_with_prefix(p);
        }
        let (inp, _) = sample(&cfg, 1);
        let mut t = Tape::new(&store);
        let (s, x) = m.encode_tokens(&mut t, &inp).unwrap();
        let obs = m.observed_feature(&mut t, &s).unwrap();
        let r = m.spatial_temporal_reconstruct(&mut t, &s, &x).unwrap();
        let want = t.value(obs.tokens).clone();
        for f in r.trajectory.iter().chain([&r.contact]) {
            assert_eq!(t.value(f.tokens), &want);
        }
    }

    #[test]
    fn branch_rejects_out_of_order_condition() {
        let cfg = ModelConfig::tiny();
        let (store, m) = build(cfg.clone(), 3);
        let (inp, _) = sample(&cfg, 2);
        let mut t = Tape::new(&store);
        let (s, x) = m.encode_tokens(&mut t, &inp).unwrap();
        let obs = m.observed_feature(&mut t, &s).unwrap();
        let r = m.spatial_temporal_reconstruct(&mut t, &s, &x).unwrap();
        assert!(m.trajectory_branch_step(&mut t, &r.trajectory[2], &r.trajectory[0], &inp.last_obs).is_err());
        assert!(m.trajectory_branch_step(&mut t, &r.trajectory[1], &obs, &inp.last_obs).is_err());
        assert!(m.trajectory_branch_step(&mut t, &r.trajectory[0], &obs, &inp.last_obs).is_ok());
        let traj = m.trajectory_branch(&mut t, &r, &obs, &inp.last_obs).unwrap();
        assert_eq!(traj.len(), 4);
    }

    #[test]
    fn zeroed_branch_is_identity() {
        let cfg = ModelConfig::tiny();
        let (mut store, m) = build(cfg.clone(), 4);
        store.zero_with_prefix("traj.");
        let (inp, _) = sample(&cfg, 3);
        let mut t = Tape::new(&store);
        let (s, x) = m.encode_tokens(&mut t, &inp).unwrap();
        let obs = m.observed_feature(&mut t, &s).unwrap();
        let r = m.spatial_temporal_reconstruct(&mut t, &s, &x).unwrap();
        let traj = m.trajectory_branch(&mut t, &r, &obs, &inp.last_obs).unwrap();
        for (a, b) in traj.iter().zip(&r.trajectory) {
            assert_eq!(t.value(a.tokens), t.value(b.tokens));
        }
    }

    fn enhance_setup(mode: JointMode, seed: u64) -> (ParameterStore, BotModel) {
        build(ModelConfig { joint_mode: mode, ..ModelConfig::tiny() }, seed)
    }

    #[test]
    fn biprogressive_structure_for_several_horizons() {
        for horizon in [3, 5, 7] {
            let cfg = ModelConfig { horizon, ..ModelConfig::tiny() };
            let (store, m) = build(cfg.clone(), 5);
            let mut t = Tape::new(&store);
            let (s, x) = {
                let (rec, _) = generate_sequence(&gen_cfg(&cfg), 0, Category::Short).unwrap();
                let (inp, _) = encode_sample(&rec, &cfg).unwrap();
                m.encode_tokens(&mut t, &inp).unwrap()
            };
            let r = m.spatial_temporal_reconstruct(&mut t, &s, &x).unwrap();
            let c = m.contact_branch(&mut t, &r.contact).unwrap();
            let e = m.bi_progressive_enhance(&mut t, &r.trajectory, &c, JointMode::Biprogressive).unwrap();
            let nc = e.trace.iter().filter(|r| matches!(r, Refinement::Contact { .. })).count();
            let nt = e.trace.iter().filter(|r| matches!(r, Refinement::Trajectory { .. })).count();
            assert_eq!((nc, nt), (horizon - 2, horizon - 2));
            assert_eq!(e.contact.tag, StepTag::Contact { refinements: horizon - 2 });
            assert_eq!(t.value(e.trajectory[0].tokens), t.value(r.trajectory[0].tokens));
        }
    }

    #[test]
    fn individual_mode_is_exact_identity_with_no_params() {
        let (store, m) = enhance_setup(JointMode::Individual, 6);
        assert_eq!(store.numel_with_prefix(ENHANCE_PREFIX), 0);
        let cfg = m.cfg.clone();
        let (inp, _) = sample(&cfg, 4);
        let mut t = Tape::new(&store);
        let (s, x) = m.encode_tokens(&mut t, &inp).unwrap();
        let r = m.spatial_temporal_reconstruct(&mut t, &s, &x).unwrap();
        let c = m.contact_branch(&mut t, &r.contact).unwrap();
        let e = m.bi_progressive_enhance(&mut t, &r.trajectory, &c, JointMode::Individual).unwrap();
        assert!(e.trace.is_empty());
        assert_eq!(e.contact.tokens, c.tokens);
        for (a, b) in e.trajectory.iter().zip(&r.trajectory) {
            assert_eq!(a.tokens, b.tokens);
        }
        assert!(m.bi_progressive_enhance(&mut t, &r.trajectory, &c, JointMode::Hand).is_err());
    }

    #[test]
    fn zeroed_enhancement_is_identity_in_every_mode() {
        for mode in JointMode::ALL {
            let (mut store, m) = enhance_setup(mode, 7);
            store.zero_with_prefix(ENHANCE_PREFIX);
            let cfg = m.cfg.clone();
            let (inp, _) = sample(&cfg, 5);
            let mut t = Tape::new(&store);
            let (s, x) = m.encode_tokens(&mut t, &inp).unwrap();
            let r = m.spatial_temporal_reconstruct(&mut t, &s, &x).unwrap();
            let c = m.contact_branch(&mut t, &r.contact).unwrap();
            let e = m.bi_progressive_enhance(&mut t, &r.trajectory, &c, mode).unwrap();
            assert_eq!(t.value(e.contact.tokens), t.value(c.tokens), "{mode}");
            for (a, b) in e.trajectory.iter().zip(&r.trajectory) {
                assert_eq!(t.value(a.tokens), t.value(b.tokens), "{mode}");
            }
        }
    }

    #[test]
    fn mode_refinement_counts() {
        let expect = [
            (JointMode::Hand, 1, 0),
            (JointMode::Object, 0, 4),
            (JointMode::Bidirectional, 1, 4),
        ];
        for (mode, nc, nt) in expect {
            let (store, m) = enhance_setup(mode, 8);
            let cfg = m.cfg.clone();
            let (inp, _) = sample(&cfg, 6);
            let mut t = Tape::new(&store);
            let out = m.forward(&mut t, &inp).unwrap();
            let c = out.trace.iter().filter(|r| matches!(r, Refinement::Contact { .. })).count();
            assert_eq!((c, out.trace.len() - c), (nc, nt), "{mode}");
        }
    }

    #[test]
    fn heatmap_head() {
        let cfg = ModelConfig::tiny();
        let (mut store, m) = build(cfg.clone(), 9);
        let (inp, _) = sample(&cfg, 7);
        {
            let mut t = Tape::new(&store);
            let out = m.forward(&mut t, &inp).unwrap();
            assert_eq!(out.traj_heatmaps.len(), 4);
            let grids = m.heatmap_grids(&t, out.traj_heatmaps[0]).unwrap();
            assert_eq!(grids.len(), 2);
        }
        store.zero_with_prefix("head.");
        let mut t = Tape::new(&store);
        let out = m.forward(&mut t, &inp).unwrap();
        let g = m.heatmap_grids(&t, out.traj_heatmaps[2]).unwrap();
        let first = g[0].values()[0];
        assert!(g.iter().all(|h| h.values().iter().all(|&v| v == first)));
    }

    #[test]
    fn one_hand_uses_right_track() {
        let cfg = ModelConfig { hands: 1, ..ModelConfig::tiny() };
        let (rec, _) = generate_sequence(&gen_cfg(&cfg), 0, Category::Medium).unwrap();
        if let Ok((inp, tgt)) = encode_sample(&rec, &cfg) {
            assert_eq!(inp.last_obs.len(), 1);
            assert_eq!(tgt.future[0], rec.hands.right.future);
        }
    }

    #[test]
    fn encode_rejects_wrong_dims() {
        let cfg = ModelConfig::tiny();
        let (rec, _) = generate_sequence(&GeneratorConfig::default(), 0, Category::Long).unwrap();
        assert!(encode_sample(&rec, &cfg).is_err());
    }

    #[test]
    fn reconstruct_gradients_on_small_grid() {
        // 4x4 token grid, D = 16, depth 1
        let cfg = ModelConfig {
            frame_w: 16,
            frame_h: 16,
            ..ModelConfig::tiny()
        };
        assert_eq!(cfg.token_grid().unwrap(), GridDims::new(4, 4));
        let (store, m) = build(cfg.clone(), 10);
        let (inp, _) = sample(&cfg, 8);
        let opts = GradCheckOptions { max_coords_per_tensor: Some(8), check_inputs: false, ..Default::default() };
        let rep = grad_check(&store, &[], &opts, |t, _| {
            let (s, x) = m.encode_tokens(t, &inp)?;
            let r = m.spatial_temporal_reconstruct(t, &s, &x)?;
            let parts: Vec<Var> = r.trajectory.iter().chain([&r.contact]).map(|f| f.tokens).collect();
            let all = t.concat_cols(&parts)?;
            let sq = t.square(all);
            Ok(t.mean(sq))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn branch_and_head_gradients() {
        let cfg = ModelConfig::tiny();
        let (store, m) = build(cfg.clone(), 11);
        let (inp, _) = sample(&cfg, 9);
        let opts = GradCheckOptions { max_coords_per_tensor: Some(6), check_inputs: false, ..Default::default() };
        let rep = grad_check(&store, &[], &opts, |t, _| {
            let out = m.forward(t, &inp)?;
            let mut parts = out.traj_heatmaps.clone();
            parts.push(out.cond);
            let mut acc = t.constant(Tensor::zeros(&[1]));
            for p in parts {
                let sq = t.square(p);
                let s = t.mean(sq);
                acc = t.add(acc, s)?;
            }
            Ok(acc)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
