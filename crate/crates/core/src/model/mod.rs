//! Denoiser: scene encoder, segment embedding into per-group channel
//! slices, transformer blocks with per-group adaptive normalization, and
//! per-group decoders with a confidence head.

mod config;
mod layers;

use std::sync::Arc;

use rand::Rng;

pub use config::{AdaLnMode, AttentionScope, ModelConfig};
pub use layers::{sinusoidal, Activation, Attention, Builder, Linear, Mlp, INIT_STD};

use crate::error::{Error, Result};
use crate::numerics::rng::{stream, Purpose};
use crate::numerics::{AttentionBlock, AttentionLayout, Graph, ParamStore, Tensor, Var};
use crate::scene::{SceneContext, AGENT_FEATURES, EGO_HISTORY_FEATURES, EGO_STATE_FEATURES, LANE_FEATURES, NAVI_FEATURES, OBSTACLE_FEATURES};

const LN_EPS: f64 = 1e-6;
/// Diffusion time is scaled by this before the sinusoidal features.
const TIME_SCALE: f64 = 1000.0;

struct Encoder {
    ego: Mlp,
    agent: Mlp,
    obstacle: Mlp,
    lane: Mlp,
    navi: Mlp,
    null: crate::numerics::ParamId,
}

struct Block {
    adaln: Vec<Linear>,
    self_attn: Attention,
    cross_attn: Attention,
    ffn: Mlp,
}

/// Parameter handles of the denoiser; values live in a [`ParamStore`].
pub struct Denoiser {
    pub config: ModelConfig,
    encoder: Encoder,
    time: Mlp,
    pre: Linear,
    blocks: Vec<Block>,
    heads: Vec<Mlp>,
    confidence: Mlp,
}

/// One forward batch. Segment rows are ordered (sample, anchor, segment).
pub struct DenoiserInput<'a> {
    pub segments: &'a Tensor,
    /// Diffusion time per (sample, group), sample-major.
    pub times: &'a [f64],
    /// Normalized contexts, one per sample.
    pub contexts: &'a [&'a SceneContext],
}

pub struct DenoiserOutput {
    /// Predicted clean segments, same layout as the input segments.
    pub x0: Var,
    /// Confidence logit per (sample, anchor).
    pub logits: Var,
    pub samples: usize,
    pub anchors: usize,
}

/// The nine modulation tensors of one block, each `[samples, D]`:
/// shift, scale and gate for the self-attention, cross-attention and
/// feed-forward sub-blocks.
pub type Modulation = [Var; 9];

impl Denoiser {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Purpose::Init, 0);
        let model = Self::register(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Handles for a checkpointed store; names and shapes must match.
    pub fn bind(config: ModelConfig, params: &ParamStore) -> Result<(Self, ParamStore)> {
        let (model, mut store) = Self::init(config, 0)?;
        store.load_from(params)?;
        Ok((model, store))
    }

    fn register(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let c = &config.caps;
        let mut b = Builder { store, rng };
        let encoder = Encoder {
            ego: b.mlp("enc.ego", c.history * EGO_HISTORY_FEATURES + EGO_STATE_FEATURES, d, d, Activation::Gelu),
            agent: b.mlp("enc.agent", c.history * AGENT_FEATURES, d, d, Activation::Gelu),
            obstacle: b.mlp("enc.obstacle", OBSTACLE_FEATURES, d, d, Activation::Gelu),
            lane: b.mlp("enc.lane", LANE_FEATURES, d, d, Activation::Gelu),
            navi: b.mlp("enc.navi", NAVI_FEATURES, d, d, Activation::Gelu),
            null: b.vector("enc.null", 1, d),
        };
        let time = b.mlp("time", config.time_features, d, d, Activation::Silu);
        let pre = b.linear("pre", config.segment_values(), config.group_width());
        let blocks = (0..config.blocks)
            .map(|i| Block {
                adaln: (0..config.groups)
                    .map(|g| b.zero_linear(&format!("block{i}.adaln{g}"), d, 9 * config.group_width()))
                    .collect(),
                self_attn: b.attention(&format!("block{i}.self"), d),
                cross_attn: b.attention(&format!("block{i}.cross"), d),
                ffn: b.mlp(&format!("block{i}.ffn"), d, config.ffn_mult * d, d, Activation::Gelu),
            })
            .collect();
        let heads = (0..config.groups)
            .map(|g| b.mlp(&format!("head{g}"), d, d, config.segment_values(), Activation::Gelu))
            .collect();
        let confidence = b.mlp("confidence", d, d, 1, Activation::Gelu);
        Ok(Self {
            config,
            encoder,
            time,
            pre,
            blocks,
            heads,
            confidence,
        })
    }

    /// Context tokens `[samples·C, D]` (sample-major, null token last in
    /// each sample) and their key mask.
    pub fn encode_context(&self, g: &mut Graph, contexts: &[&SceneContext]) -> Result<(Var, Vec<bool>)> {
        let cfg = &self.config;
        let caps = &cfg.caps;
        let b = contexts.len();
        for c in contexts {
            if !c.caps_match(caps) {
                return Err(Error::Dimension("context shape does not match the model caps".into()));
            }
        }
        let ego: Vec<f64> = contexts
            .iter()
            .flat_map(|c| c.ego_history.iter().flatten().chain(c.ego_state.iter()).copied().collect::<Vec<_>>())
            .collect();
        let ego_in = g.input(Tensor::new(vec![b, caps.history * EGO_HISTORY_FEATURES + EGO_STATE_FEATURES], ego)?);
        let mut parts = vec![self.encoder.ego.apply(g, ego_in)?];
        let mut kinds = vec![1usize];
        let mut masks: Vec<Vec<bool>> = vec![vec![true; b]];
        if caps.agents > 0 {
            let data: Vec<f64> = contexts.iter().flat_map(|c| c.agents.iter().flatten().flatten().copied()).collect();
            let x = g.input(Tensor::new(vec![b * caps.agents, caps.history * AGENT_FEATURES], data)?);
            parts.push(self.encoder.agent.apply(g, x)?);
            kinds.push(caps.agents);
            masks.push(contexts.iter().flat_map(|c| c.agent_mask.iter().copied()).collect());
        }
        if caps.obstacles > 0 {
            let data: Vec<f64> = contexts.iter().flat_map(|c| c.obstacles.iter().flatten().copied()).collect();
            let x = g.input(Tensor::new(vec![b * caps.obstacles, OBSTACLE_FEATURES], data)?);
            parts.push(self.encoder.obstacle.apply(g, x)?);
            kinds.push(caps.obstacles);
            masks.push(contexts.iter().flat_map(|c| c.obstacle_mask.iter().copied()).collect());
        }
        if caps.map_lanes > 0 {
            let data: Vec<f64> = contexts.iter().flat_map(|c| c.lanes.iter().flatten().flatten().copied()).collect();
            let x = g.input(Tensor::new(vec![b * caps.map_lanes * caps.points, LANE_FEATURES], data)?);
            let h = self.encoder.lane.apply(g, x)?;
            let mask: Vec<bool> = contexts.iter().flat_map(|c| c.lane_mask.iter().copied()).collect();
            let valid: Vec<bool> = mask.iter().flat_map(|&m| std::iter::repeat_n(m, caps.points)).collect();
            parts.push(g.max_pool_rows(h, b * caps.map_lanes, &valid)?);
            kinds.push(caps.map_lanes);
            masks.push(mask);
        }
        let null = g.param(self.encoder.null);
        parts.push(null);
        let all = g.concat_rows(&parts)?;

        // Reorder to sample-major blocks.
        let per: usize = kinds.iter().sum::<usize>() + 1;
        let mut index = Vec::with_capacity(b * per);
        let mut key_valid = Vec::with_capacity(b * per);
        for s in 0..b {
            let mut offset = 0;
            for (k, m) in kinds.iter().zip(&masks) {
                for j in 0..*k {
                    index.push(offset + s * k + j);
                    key_valid.push(m[s * k + j]);
                }
                offset += b * k;
            }
            index.push(offset);
            key_valid.push(true);
        }
        let tokens = g.gather_rows(all, Arc::new(index))?;
        Ok((g.layer_norm(tokens, LN_EPS), key_valid))
    }

    /// Navigation embedding per sample, `[samples, D]`.
    fn encode_navi(&self, g: &mut Graph, contexts: &[&SceneContext]) -> Result<Var> {
        let caps = &self.config.caps;
        let b = contexts.len();
        let rows = caps.route_lanes * caps.points;
        if rows == 0 {
            return Ok(g.input(Tensor::zeros(&[b, self.config.dim])));
        }
        let data: Vec<f64> = contexts.iter().flat_map(|c| c.navi.iter().flatten().flatten().copied()).collect();
        let x = g.input(Tensor::new(vec![b * rows, NAVI_FEATURES], data)?);
        let h = self.encoder.navi.apply(g, x)?;
        let valid: Vec<bool> = contexts
            .iter()
            .flat_map(|c| c.navi_mask.iter().flat_map(|&m| std::iter::repeat_n(m, caps.points)))
            .collect();
        g.max_pool_rows(h, b, &valid)
    }

    /// `y = F_time(sinusoidal(t)) + F_navi(navi)`, one row per entry of
    /// `times`; `per_sample` consecutive rows share a sample's navi.
    fn condition(&self, g: &mut Graph, times: &[f64], navi: Var, per_sample: usize) -> Result<Var> {
        let w = self.config.time_features;
        let feats: Vec<f64> = times.iter().flat_map(|&t| sinusoidal(t * TIME_SCALE, w)).collect();
        let x = g.input(Tensor::new(vec![times.len(), w], feats)?);
        let te = self.time.apply(g, x)?;
        let idx: Vec<usize> = (0..times.len()).map(|i| i / per_sample).collect();
        let nv = g.gather_rows(navi, Arc::new(idx))?;
        g.add(te, nv)
    }

    /// Group conditions `[samples·G, D]` (decoupled) or `[samples, D]`
    /// from the mean time of each sample (monolithic).
    pub fn conditions(&self, g: &mut Graph, times: &[f64], contexts: &[&SceneContext]) -> Result<Var> {
        let groups = self.config.groups;
        if times.len() != contexts.len() * groups {
            return Err(Error::Dimension(format!(
                "{} group times for {} samples of {groups} groups",
                times.len(),
                contexts.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("group time {t} outside [0, 1]")));
        }
        let navi = self.encode_navi(g, contexts)?;
        match self.config.adaln {
            AdaLnMode::Decoupled => self.condition(g, times, navi, groups),
            AdaLnMode::Monolithic => {
                let mean: Vec<f64> = times.chunks(groups).map(|c| c.iter().sum::<f64>() / groups as f64).collect();
                self.condition(g, &mean, navi, 1)
            }
        }
    }

    /// Modulation of block `block` from the conditions. Channel slice `g`
    /// of every output comes from group `g`'s adaptive head.
    pub fn td_adaln(&self, g: &mut Graph, block: usize, cond: Var, samples: usize) -> Result<Modulation> {
        let groups = self.config.groups;
        let w = self.config.group_width();
        let d = self.config.dim;
        let heads = &self.blocks[block].adaln;
        let y = g.silu(cond);
        let mut chunks: Vec<Var> = Vec::with_capacity(9);
        match self.config.adaln {
            AdaLnMode::Decoupled => {
                let mut outs = Vec::with_capacity(groups);
                for (gi, head) in heads.iter().enumerate() {
                    let rows = g.gather_rows(y, Arc::new((0..samples).map(|s| s * groups + gi).collect()))?;
                    outs.push(head.apply(g, rows)?);
                }
                for j in 0..9 {
                    let parts = outs
                        .iter()
                        .map(|&o| g.slice_cols(o, j * w, (j + 1) * w))
                        .collect::<Result<Vec<_>>>()?;
                    chunks.push(g.concat_cols(&parts)?);
                }
            }
            AdaLnMode::Monolithic => {
                let mut wparts = Vec::with_capacity(9 * groups);
                let mut bparts = Vec::with_capacity(9 * groups);
                for j in 0..9 {
                    for head in heads {
                        let (wv, bv) = (g.param(head.w), g.param(head.b));
                        wparts.push(g.slice_cols(wv, j * w, (j + 1) * w)?);
                        bparts.push(g.slice_cols(bv, j * w, (j + 1) * w)?);
                    }
                }
                let wm = g.concat_cols(&wparts)?;
                let bm = g.concat_cols(&bparts)?;
                let out = g.linear(y, wm, bm)?;
                for j in 0..9 {
                    chunks.push(g.slice_cols(out, j * d, (j + 1) * d)?);
                }
            }
        }
        Ok(chunks.try_into().expect("nine modulation chunks"))
    }

    /// Token rows `[samples·anchors·R, D]`: row `j` of an anchor holds, in
    /// channel slice `g`, the projection of segment `g·R + j` plus a fixed
    /// positional code of that segment index.
    pub fn embed_segments(&self, g: &mut Graph, segments: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        let (n, groups, r, w) = (cfg.segments, cfg.groups, cfg.rows_per_anchor(), cfg.group_width());
        if segments.shape().len() != 2 || segments.cols() != cfg.segment_values() || !segments.rows().is_multiple_of(n) {
            return Err(Error::Dimension(format!(
                "segments {:?} do not fit {n} segments of {} values",
                segments.shape(),
                cfg.segment_values()
            )));
        }
        let anchors_total = segments.rows() / n;
        let x = g.input(segments.clone());
        let proj = self.pre.apply(g, x)?;
        let mut slices = Vec::with_capacity(groups);
        for gi in 0..groups {
            let idx: Vec<usize> = (0..anchors_total)
                .flat_map(|a| (0..r).map(move |j| a * n + gi * r + j))
                .collect();
            slices.push(g.gather_rows(proj, Arc::new(idx))?);
        }
        let h = g.concat_cols(&slices)?;
        let mut pe = Vec::with_capacity(anchors_total * r * cfg.dim);
        for _ in 0..anchors_total {
            for j in 0..r {
                for gi in 0..groups {
                    pe.extend(sinusoidal((gi * r + j) as f64, w));
                }
            }
        }
        let pe = g.input(Tensor::new(vec![anchors_total * r, cfg.dim], pe)?);
        g.add(h, pe)
    }

    fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let s = g.mul(n, scale)?;
        let n = g.add(n, s)?;
        g.add(n, shift)
    }

    pub fn forward(&self, g: &mut Graph, input: &DenoiserInput<'_>) -> Result<DenoiserOutput> {
        let cfg = &self.config;
        let samples = input.contexts.len();
        let (n, r) = (cfg.segments, cfg.rows_per_anchor());
        if samples == 0 || !input.segments.rows().is_multiple_of(samples * n) {
            return Err(Error::Dimension("segment rows do not split evenly over samples".into()));
        }
        let anchors = input.segments.rows() / (samples * n);
        let rows_per_sample = anchors * r;
        let total_rows = samples * rows_per_sample;

        let mut x = self.embed_segments(g, input.segments)?;
        let cond = self.conditions(g, input.times, input.contexts)?;
        let (ctx, key_valid) = self.encode_context(g, input.contexts)?;
        let per_ctx = key_valid.len() / samples;

        let self_block = match cfg.attention {
            AttentionScope::WithinAnchor => r,
            AttentionScope::SceneWide => rows_per_sample,
        };
        let self_layout = Arc::new(AttentionLayout::self_blocks(total_rows, self_block));
        let cross_layout = Arc::new(AttentionLayout {
            blocks: (0..samples)
                .map(|s| AttentionBlock {
                    q_start: s * rows_per_sample,
                    q_len: rows_per_sample,
                    kv_start: s * per_ctx,
                    kv_len: per_ctx,
                })
                .collect(),
            key_valid,
        });
        let row_sample = Arc::new((0..total_rows).map(|i| i / rows_per_sample).collect::<Vec<_>>());

        for (bi, block) in self.blocks.iter().enumerate() {
            let m = self.td_adaln(g, bi, cond, samples)?;
            let m: Vec<Var> = m
                .iter()
                .map(|&v| g.gather_rows(v, row_sample.clone()))
                .collect::<Result<_>>()?;

            let h = Self::modulate(g, x, m[0], m[1])?;
            let h = block.self_attn.apply(g, h, h, cfg.heads, self_layout.clone())?;
            let h = g.mul(h, m[2])?;
            x = g.add(x, h)?;

            let h = Self::modulate(g, x, m[3], m[4])?;
            let h = block.cross_attn.apply(g, h, ctx, cfg.heads, cross_layout.clone())?;
            let h = g.mul(h, m[5])?;
            x = g.add(x, h)?;

            let h = Self::modulate(g, x, m[6], m[7])?;
            let h = block.ffn.apply(g, h)?;
            let h = g.mul(h, m[8])?;
            x = g.add(x, h)?;
        }

        let xn = g.layer_norm(x, LN_EPS);
        let decoded = self
            .heads
            .iter()
            .map(|h| h.apply(g, xn))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&decoded)?;
        // stacked rows are (group, anchor, j); reorder to (anchor, segment).
        let total_anchors = samples * anchors;
        let idx: Vec<usize> = (0..total_anchors)
            .flat_map(|a| (0..n).map(move |seg| (seg / r) * total_anchors * r + a * r + seg % r))
            .collect();
        let x0 = g.gather_rows(stacked, Arc::new(idx))?;

        let pooled = g.mean_pool_rows(xn, r)?;
        let logits = self.confidence.apply(g, pooled)?;
        Ok(DenoiserOutput {
            x0,
            logits,
            samples,
            anchors,
        })
    }

    /// Forward pass without gradients: `(x̂₀ values, logits)`.
    pub fn predict(&self, params: &ParamStore, input: &DenoiserInput<'_>) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::with_params(params);
        let out = self.forward(&mut g, input)?;
        let x0 = g.value(out.x0).clone();
        let logits = g.value(out.logits).data().to_vec();
        Ok((x0, logits))
    }

    /// Modulation values of every block, for inspection.
    pub fn modulation_values(&self, params: &ParamStore, times: &[f64], contexts: &[&SceneContext]) -> Result<Vec<[Tensor; 9]>> {
        let mut g = Graph::with_params(params);
        let cond = self.conditions(&mut g, times, contexts)?;
        (0..self.blocks.len())
            .map(|b| {
                let m = self.td_adaln(&mut g, b, cond, contexts.len())?;
                Ok(m.map(|v| g.value(v).clone()))
            })
            .collect()
    }
}
