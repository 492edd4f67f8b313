//! Multi-view alignment and aggregation: cross-attention from target
//! proposals into each stored view, attention across views per proposal,
//! and the box prediction / cross-view heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geometry::{decode_residuals, encode_residuals, Box7, ResidualVec};
use crate::nn::{Linear, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// One MLP over `[7 residuals; dt]`.
    #[default]
    Joint,
    /// Residual MLP and frame-delta MLP, summed.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    /// Keys are the union of all stored and target proposals.
    #[default]
    Union,
    /// Keys are only the view's own proposals.
    PerFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvaaConfig {
    /// When false the box head reads the target proposal features directly.
    pub enabled: bool,
    /// Key points per side for rotated ROI features.
    pub roi_grid: usize,
    /// Attention width C'; 0 means the feature width C.
    pub attn_channels: usize,
    pub heads: usize,
    pub bias: BiasMode,
    pub keys: KeyMode,
    /// Present the target frame as an extra view to both stages.
    pub include_target_view: bool,
    /// Add the query features to the alignment output.
    pub residual: bool,
    /// Train the per-view cross-view heads.
    pub crossview: bool,
}

impl Default for MvaaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            roi_grid: 7,
            attn_channels: 0,
            heads: 1,
            bias: BiasMode::Joint,
            keys: KeyMode::Union,
            include_target_view: true,
            residual: false,
            crossview: true,
        }
    }
}

impl MvaaConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.roi_grid == 0 {
            return invalid("roi_grid must be at least 1");
        }
        let c = self.attn_width(channels);
        if self.heads == 0 || c % self.heads != 0 {
            return invalid(format!("attention width {c} not divisible into {} heads", self.heads));
        }
        Ok(())
    }

    pub fn attn_width(&self, channels: usize) -> usize {
        if self.attn_channels == 0 {
            channels
        } else {
            self.attn_channels
        }
    }
}

/// `encode_residuals(key_j, query_i)` for every pair, shape `[N, M, 7]`.
pub fn pairwise_box_residuals(queries: &[Box7], keys: &[Box7]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(queries.len() * keys.len() * 7);
    for q in queries {
        for k in keys {
            data.extend_from_slice(&encode_residuals(k, q)?.to_array());
        }
    }
    Ok(Tensor::new(vec![queries.len(), keys.len(), 7], data))
}

#[derive(Debug, Clone)]
struct Projections {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    width: usize,
}

impl Projections {
    fn new(store: &mut ParamStore, name: &str, c: usize, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), c, width, rng),
            k: Linear::new(store, &format!("{name}.k"), c, width, rng),
            v: Linear::new(store, &format!("{name}.v"), c, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, c, rng),
            heads,
            width,
        }
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn split(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        if self.heads == 1 {
            return vec![x];
        }
        let d = self.head_dim();
        (0..self.heads).map(|h| g.slice_cols(x, h * d, d)).collect()
    }

    fn merge(&self, g: &mut Graph, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_cols(parts)
        }
    }
}

#[derive(Debug, Clone)]
enum BiasNet {
    Joint(Mlp),
    Separate { residual: Mlp, dt: Mlp },
}

#[derive(Debug, Clone)]
pub struct Alignment {
    proj: Projections,
    bias: BiasNet,
    residual: bool,
}

/// Output of one alignment pass.
#[derive(Debug, Clone)]
pub struct AlignOutput {
    /// `N x C` features `V_s`.
    pub features: Var,
    /// `N x M` attention of the first head; absent when every key was masked.
    pub attention: Option<Var>,
    pub all_masked: bool,
}

impl Alignment {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, cfg: &MvaaConfig, rng: &mut impl Rng) -> Self {
        let width = cfg.attn_width(c);
        let bias = match cfg.bias {
            BiasMode::Joint => BiasNet::Joint(Mlp::new(store, &format!("{name}.bias"), 8, &[c, 1], false, rng)),
            BiasMode::Separate => BiasNet::Separate {
                residual: Mlp::new(store, &format!("{name}.bias_res"), 7, &[c, 1], false, rng),
                dt: Mlp::new(store, &format!("{name}.bias_dt"), 1, &[c, 1], false, rng),
            },
        };
        Self {
            proj: Projections::new(store, name, c, width, cfg.heads, rng),
            bias,
            residual: cfg.residual,
        }
    }

    fn bias_logits(&self, g: &mut Graph, store: &ParamStore, res: &Tensor, dt: f64) -> Var {
        let (n, m) = (res.shape[0], res.shape[1]);
        let flat = match &self.bias {
            BiasNet::Joint(mlp) => {
                let mut data = Vec::with_capacity(n * m * 8);
                for r in res.data.chunks(7) {
                    data.extend_from_slice(r);
                    data.push(dt);
                }
                let x = g.constant(Tensor::matrix(n * m, 8, data));
                mlp.forward(g, store, x)
            }
            BiasNet::Separate { residual, dt: dmlp } => {
                let x = g.constant(Tensor::matrix(n * m, 7, res.data.clone()));
                let r = residual.forward(g, store, x);
                let d = g.constant(Tensor::matrix(1, 1, vec![dt]));
                let d = dmlp.forward(g, store, d);
                let ones = g.constant(Tensor::full(vec![n * m, 1], 1.0));
                let d = g.matmul(ones, d);
                g.add(r, d)
            }
        };
        g.reshape(flat, n, m)
    }

    /// Cross-attention from target proposals (`f_t`, boxes `b_t`) into the
    /// keys of one view (`f_s`, boxes `b_s` in the same frame as `b_t`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_t: Var,
        b_t: &[Box7],
        f_s: Var,
        b_s: &[Box7],
        key_valid: &[bool],
        dt: f64,
    ) -> Result<AlignOutput> {
        let (n, m) = (g.value(f_t).rows(), g.value(f_s).rows());
        if b_t.len() != n || b_s.len() != m || key_valid.len() != m {
            return Err(crate::Error::Shape(format!(
                "alignment inputs: {n} queries/{} boxes, {m} keys/{} boxes/{} flags",
                b_t.len(),
                b_s.len(),
                key_valid.len()
            )));
        }
        let c = g.value(f_t).cols();
        if !key_valid.iter().any(|v| *v) {
            let z = g.constant(Tensor::zeros(vec![n, c]));
            return Ok(AlignOutput {
                features: z,
                attention: None,
                all_masked: true,
            });
        }
        let q = self.proj.q.forward(g, store, f_t);
        let k = self.proj.k.forward(g, store, f_s);
        let v = self.proj.v.forward(g, store, f_s);
        let res = pairwise_box_residuals(b_t, b_s)?;
        let bias = self.bias_logits(g, store, &res, dt);
        let mut mask = Vec::with_capacity(n * m);
        for _ in 0..n {
            mask.extend(key_valid.iter().map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY }));
        }
        let mask = g.constant(Tensor::matrix(n, m, mask));
        let bias = g.add(bias, mask);
        let scale = 1.0 / (self.proj.head_dim() as f64).sqrt();
        let (qs, ks, vs) = (self.proj.split(g, q), self.proj.split(g, k), self.proj.split(g, v));
        let mut outs = Vec::with_capacity(qs.len());
        let mut first = None;
        for h in 0..qs.len() {
            let logits = g.matmul_bt(qs[h], ks[h]);
            let logits = g.scale(logits, scale);
            let logits = g.add(logits, bias);
            let a = g.softmax_rows(logits);
            first.get_or_insert(a);
            outs.push(g.matmul(a, vs[h]));
        }
        let merged = self.proj.merge(g, &outs);
        let mut y = self.proj.out.forward(g, store, merged);
        if self.residual {
            y = g.add(y, f_t);
        }
        Ok(AlignOutput {
            features: y,
            attention: first,
            all_masked: false,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Aggregation {
    proj: Projections,
}

impl Aggregation {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, cfg: &MvaaConfig, rng: &mut impl Rng) -> Self {
        Self {
            proj: Projections::new(store, name, c, cfg.attn_width(c), cfg.heads, rng),
        }
    }

    /// Per-proposal attention of `f_t` over its features in each view.
    /// Views with `view_valid[s] == false` receive zero weight.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_t: Var, views: &[Var], view_valid: &[bool]) -> Result<Var> {
        if views.is_empty() {
            return invalid("aggregation needs at least one view");
        }
        if view_valid.len() != views.len() {
            return invalid("one validity flag per view required");
        }
        let n = g.value(f_t).rows();
        let q = self.proj.q.forward(g, store, f_t);
        let qs = self.proj.split(g, q);
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for &view in views {
            let k = self.proj.k.forward(g, store, view);
            let v = self.proj.v.forward(g, store, view);
            ks.push(self.proj.split(g, k));
            vs.push(self.proj.split(g, v));
        }
        let mut mask = Vec::with_capacity(n * views.len());
        for _ in 0..n {
            mask.extend(view_valid.iter().map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY }));
        }
        let mask = g.constant(Tensor::matrix(n, views.len(), mask));
        let scale = 1.0 / (self.proj.head_dim() as f64).sqrt();
        let mut outs = Vec::with_capacity(qs.len());
        for h in 0..qs.len() {
            let cols: Vec<Var> = ks.iter().map(|k| g.row_dot(qs[h], k[h])).collect();
            let logits = if cols.len() == 1 { cols[0] } else { g.concat_cols(&cols) };
            let logits = g.scale(logits, scale);
            let logits = g.add(logits, mask);
            let a = g.softmax_rows(logits);
            let mut acc: Option<Var> = None;
            for (s, v) in vs.iter().enumerate() {
                let w = if views.len() == 1 { a } else { g.slice_cols(a, s, 1) };
                let term = g.mul_col(v[h], w);
                acc = Some(match acc {
                    None => term,
                    Some(prev) => g.add(prev, term),
                });
            }
            outs.push(acc.expect("at least one view"));
        }
        let merged = self.proj.merge(g, &outs);
        Ok(self.proj.out.forward(g, store, merged))
    }
}

/// Objectness and 7 box residuals (1-bin orientation) per proposal.
#[derive(Debug, Clone)]
pub struct BoxHead {
    embed: Mlp,
    cls: Linear,
    reg: Linear,
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            embed: Mlp::new(store, &format!("{name}.embed"), c, &[c, c], true, rng),
            cls: Linear::new_head(store, &format!("{name}.cls"), c, 1, rng),
            reg: Linear::new_head(store, &format!("{name}.reg"), c, 7, rng),
        }
    }

    /// Returns `(N x 1 logits, N x 7 residuals)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> (Var, Var) {
        let e = self.embed.forward(g, store, x);
        (self.cls.forward(g, store, e), self.reg.forward(g, store, e))
    }
}

/// Apply predicted residuals (`N x 7`) to their proposals.
pub fn decode_predictions(residuals: &Tensor, proposals: &[Box7]) -> Result<Vec<Box7>> {
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = ResidualVec::from_array(residuals.row(i).try_into().expect("7 residuals"));
            r.dl = r.dl.clamp(-4.0, 4.0);
            r.dw = r.dw.clamp(-4.0, 4.0);
            r.dh = r.dh.clamp(-4.0, 4.0);
            decode_residuals(&r, p)
        })
        .collect()
}

/// One view presented to MVAA: its key features and boxes (in the target
/// frame) and the frame delta to the target.
#[derive(Debug, Clone)]
pub struct ViewInput {
    pub features: Var,
    pub boxes: Vec<Box7>,
    pub valid: Vec<bool>,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct MvaaOutput {
    pub aligned: Vec<AlignOutput>,
    pub aggregated: Var,
    pub objectness: Var,
    pub residuals: Var,
    /// `(objectness, residuals)` of the cross-view heads, one per view.
    pub crossview: Vec<(Var, Var)>,
}

/// Alignment, aggregation and the cross-view head exist only when enabled.
#[derive(Debug, Clone)]
pub struct Mvaa {
    pub cfg: MvaaConfig,
    align: Option<Alignment>,
    aggregate: Option<Aggregation>,
    head: BoxHead,
    cv_head: Option<BoxHead>,
}

impl Mvaa {
    pub fn new(store: &mut ParamStore, c: usize, cfg: &MvaaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(c)?;
        let on = cfg.enabled;
        let align = on.then(|| Alignment::new(store, "mvaa.align", c, cfg, rng));
        let aggregate = on.then(|| Aggregation::new(store, "mvaa.agg", c, cfg, rng));
        let head = BoxHead::new(store, "mvaa.head", c, rng);
        let cv_head = (on && cfg.crossview).then(|| BoxHead::new(store, "mvaa.cv", c, rng));
        Ok(Self {
            cfg: cfg.clone(),
            align,
            aggregate,
            head,
            cv_head,
        })
    }

    pub fn alignment(&self) -> Option<&Alignment> {
        self.align.as_ref()
    }

    pub fn aggregation(&self) -> Option<&Aggregation> {
        self.aggregate.as_ref()
    }

    pub fn box_head(&self) -> &BoxHead {
        &self.head
    }

    pub fn crossview_head(&self) -> Option<&BoxHead> {
        self.cv_head.as_ref()
    }

    /// Full second stage for the target proposals `f_t` / `b_t`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_t: Var, b_t: &[Box7], views: &[ViewInput]) -> Result<MvaaOutput> {
        let (Some(align), Some(aggregate)) = (&self.align, &self.aggregate) else {
            let (o, r) = self.head.forward(g, store, f_t);
            return Ok(MvaaOutput {
                aligned: Vec::new(),
                aggregated: f_t,
                objectness: o,
                residuals: r,
                crossview: Vec::new(),
            });
        };
        let mut aligned = Vec::with_capacity(views.len());
        for v in views {
            aligned.push(align.forward(g, store, f_t, b_t, v.features, &v.boxes, &v.valid, v.dt)?);
        }
        let feats: Vec<Var> = aligned.iter().map(|a| a.features).collect();
        let ok: Vec<bool> = aligned.iter().map(|a| !a.all_masked).collect();
        let aggregated = aggregate.forward(g, store, f_t, &feats, &ok)?;
        let (objectness, residuals) = self.head.forward(g, store, aggregated);
        let crossview = match &self.cv_head {
            Some(h) => aligned.iter().filter(|a| !a.all_masked).map(|a| h.forward(g, store, a.features)).collect(),
            None => Vec::new(),
        };
        Ok(MvaaOutput {
            aligned,
            aggregated,
            objectness,
            residuals,
            crossview,
        })
    }
}
