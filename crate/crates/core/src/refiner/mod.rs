//! Click-conditioned refinement of the automatic segmentation.
//!
//! The encoder's half-resolution features inside a fixed-size window are
//! flattened into tokens (plus a learned positional table). Each click picks
//! out the feature row under it. A stack of layers then alternates
//! [click encoding](click_encoding) and [label assignment](label_assignment);
//! a linear head maps the final tokens to class logits, which are duplicated
//! back to full resolution.

mod click_encoding;
mod label_assignment;
mod tokens;

pub use tokens::{click_cells, index_clicks, tokenize};

use crate::encoder::{bounding_roi, crop_rows, automatic_mask, EncoderOutput, Roi};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::volume::{in_bounds, voxel_count, voxel_index, Dims, LabelMask};

use click_encoding::ClickEncoderVars;
use label_assignment::LabelAssignVars;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Click {
    /// Full-resolution voxel `(x, y, z)`.
    pub position: [usize; 3],
    pub category: u8,
}

impl Click {
    pub fn new(position: [usize; 3], category: u8) -> Self {
        Self { position, category }
    }
}

/// Ordered user interactions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClickSet {
    clicks: Vec<Click>,
}

impl ClickSet {
    pub fn new(clicks: Vec<Click>) -> Self {
        Self { clicks }
    }

    pub fn push(&mut self, click: Click) {
        self.clicks.push(click);
    }

    pub fn pop(&mut self) -> Option<Click> {
        self.clicks.pop()
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Click> {
        self.clicks.iter()
    }

    pub fn as_slice(&self) -> &[Click] {
        &self.clicks
    }

    pub fn categories(&self) -> Vec<usize> {
        self.clicks.iter().map(|c| c.category as usize).collect()
    }

    pub fn validate(&self, dims: Dims, classes: usize) -> Result<()> {
        for c in &self.clicks {
            if !in_bounds(dims, c.position) {
                return Err(Error::Position {
                    position: c.position,
                    extents: dims,
                });
            }
            if c.category as usize >= classes {
                return Err(Error::Index {
                    context: "click category",
                    index: c.category as usize,
                    bound: classes,
                });
            }
        }
        Ok(())
    }
}

impl FromIterator<Click> for ClickSet {
    fn from_iter<I: IntoIterator<Item = Click>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Which of the two attention modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// When off, indexed click features are used as-is in every layer.
    pub click_encoding: bool,
    /// When off, label assignment copies a projection of the click
    /// embeddings and classification compares tokens with the clicks.
    pub label_copy: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        click_encoding: true,
        label_copy: true,
    };
    pub const NO_CLICK_ENCODING: Ablation = Ablation {
        click_encoding: false,
        label_copy: true,
    };
    pub const NO_LABEL_COPY: Ablation = Ablation {
        click_encoding: true,
        label_copy: false,
    };

    pub fn parse(name: &str) -> Result<Ablation> {
        match name {
            "none" => Ok(Self::NONE),
            "no-click-encoding" => Ok(Self::NO_CLICK_ENCODING),
            "no-label-copy" => Ok(Self::NO_LABEL_COPY),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.click_encoding, self.label_copy) {
            (true, true) => "none",
            (false, true) => "no-click-encoding",
            (true, false) => "no-label-copy",
            (false, false) => "no-click-encoding+no-label-copy",
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::NONE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerConfig {
    /// Token width `m`; must match the encoder feature width.
    pub features: usize,
    pub classes: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub label_hidden: usize,
    /// Full-resolution window the positional table is sized for.
    pub crop: Dims,
    /// Dilation of the foreground/click bounding box, in voxels.
    pub margin: usize,
    /// Add per-class mean tokens of the automatic mask as extra exemplars
    /// in label assignment.
    pub auto_exemplars: bool,
    /// Carry tokens across layers as `norm(tokens + assigned)` instead of
    /// replacing them with the assignment output.
    pub stack_residual: bool,
    pub ablation: Ablation,
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.features == 0 || self.heads == 0 || !self.features.is_multiple_of(self.heads) {
            return bad(format!("feature width {} not divisible by {} heads", self.features, self.heads));
        }
        if self.layers == 0 || self.classes < 2 || self.ffn_hidden == 0 || self.label_hidden == 0 {
            return bad("layers, ffn/label widths must be positive and classes >= 2".into());
        }
        if self.crop.iter().any(|&e| e < 2 || e % 2 != 0) {
            return bad(format!("crop {:?} must be even", self.crop));
        }
        Ok(())
    }

    pub fn token_grid(&self) -> Dims {
        self.crop.map(|e| e / 2)
    }
}

/// Everything the stack needs for one volume + click set, restricted to the
/// refinement window.
#[derive(Clone, Debug)]
pub(crate) struct Prepared {
    pub window: Roi,
    pub half: Dims,
    pub features: Tensor,
    /// Click positions relative to the window.
    pub clicks: ClickSet,
    pub auto_half: Vec<usize>,
}

pub(crate) struct Forward {
    pub logits: Var,
    pub cross_attention: Vec<Var>,
    pub self_attention: Vec<Var>,
    pub assign_attention: Vec<Var>,
}

/// Attention matrices and outputs of one refinement pass.
#[derive(Clone, Debug)]
pub struct RefineTrace {
    pub window: Roi,
    /// Full-resolution logits for the whole volume.
    pub logits: Tensor,
    pub cross_attention: Vec<Tensor>,
    pub self_attention: Vec<Tensor>,
    pub assign_attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ClickEncoding {
    pub clicks: Tensor,
    pub cross_out: Tensor,
    pub cross_attention: Vec<Tensor>,
    pub self_attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LabelAssignment {
    pub tokens: Tensor,
    pub attention: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    config: RefinerConfig,
    params: ParamStore,
}

impl Refiner {
    pub fn new(config: RefinerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let m = config.features;
        let n = voxel_count(config.token_grid());
        let mut params = ParamStore::new();
        params.add("pe", Tensor::from_fn(&[n, m], |_| rng.uniform_in(-0.05, 0.05)))?;
        for l in 0..config.layers {
            if config.ablation.click_encoding {
                click_encoding::add_params(&mut params, &format!("l{l}.encode"), m, config.ffn_hidden, rng)?;
            }
            label_assignment::add_params(
                &mut params,
                &format!("l{l}.assign"),
                m,
                config.classes,
                config.label_hidden,
                config.ablation.label_copy,
                rng,
            )?;
            if config.stack_residual {
                params.add(format!("l{l}.norm.gain"), Tensor::full(&[m], 1.0))?;
                params.add(format!("l{l}.norm.bias"), Tensor::zeros(&[m]))?;
            }
        }
        if config.ablation.label_copy {
            params.add_glorot("head.w", &[m, config.classes], m, config.classes, rng)?;
            params.add("head.b", Tensor::zeros(&[config.classes]))?;
        } else {
            params.add("head.alpha", Tensor::scalar(0.0))?;
            params.add("head.scale", Tensor::scalar(4.0))?;
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: RefinerConfig, loaded: &ParamStore) -> Result<Self> {
        let mut r = Self::new(config, &mut Rng::new(0))?;
        if loaded.len() != r.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} refiner parameters, found {}", r.params.len(), loaded.len()),
            ));
        }
        r.params.load_from(loaded)?;
        Ok(r)
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn prepare(&self, enc: &EncoderOutput, auto: &LabelMask, clicks: &ClickSet) -> Result<Prepared> {
        if clicks.is_empty() {
            return Err(Error::Contract("refinement needs at least one click".into()));
        }
        if enc.classes != self.config.classes || enc.feature_width() != self.config.features {
            return Err(Error::shape(
                "refiner vs encoder output",
                &[self.config.classes, self.config.features],
                &[enc.classes, enc.feature_width()],
            ));
        }
        clicks.validate(enc.dims, enc.classes)?;
        let roi = bounding_roi(auto, clicks, self.config.margin);
        let window = roi.fit(self.config.crop, enc.dims);
        let half = window.size().map(|e| e / 2);
        let features = crop_rows(&enc.features, enc.feature_dims(), window.lo.map(|e| e / 2), window.hi.map(|e| e / 2));
        let local = clicks
            .iter()
            .map(|c| {
                let p = [0, 1, 2].map(|a| c.position[a].clamp(window.lo[a], window.hi[a] - 1) - window.lo[a]);
                Click::new(p, c.category)
            })
            .collect();
        let mut auto_half = Vec::with_capacity(voxel_count(half));
        for z in 0..half[2] {
            for y in 0..half[1] {
                for x in 0..half[0] {
                    let p = [x, y, z].map(|v| 2 * v);
                    let p = [0, 1, 2].map(|a| p[a] + window.lo[a]);
                    auto_half.push(auto.get(p) as usize);
                }
            }
        }
        Ok(Prepared {
            window,
            half,
            features,
            clicks: local,
            auto_half,
        })
    }

    pub(crate) fn forward(&self, g: &mut Graph, prep: &Prepared) -> Result<Forward> {
        let cfg = &self.config;
        let store = &self.params;
        let m = cfg.features;

        let feats = g.input(prep.features.clone());
        let pe = g.param(store, store.id("pe")?);
        if g.value(pe).shape() != g.value(feats).shape() {
            return Err(Error::shape("tokenize (positional table)", g.value(feats).shape(), g.value(pe).shape()));
        }
        let mut tokens = g.add(feats, pe)?;
        let cells = click_cells(prep.half, &prep.clicks)?;
        let mut clicks = g.gather_rows(feats, &cells)?;
        let click_labels = prep.clicks.categories();

        let exemplar_classes: Vec<usize> = if cfg.auto_exemplars {
            (0..cfg.classes).filter(|c| prep.auto_half.contains(c)).collect()
        } else {
            Vec::new()
        };
        let averaging = if exemplar_classes.is_empty() {
            None
        } else {
            let n = prep.auto_half.len();
            let mut p = Tensor::zeros(&[exemplar_classes.len(), n]);
            for (r, &c) in exemplar_classes.iter().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| prep.auto_half[i] == c).collect();
                let w = 1.0 / members.len() as f64;
                for i in members {
                    p.data_mut()[r * n + i] = w;
                }
            }
            Some(g.input(p))
        };
        let mut key_labels = click_labels.clone();
        key_labels.extend(&exemplar_classes);

        let mut fwd = Forward {
            logits: tokens,
            cross_attention: Vec::new(),
            self_attention: Vec::new(),
            assign_attention: Vec::new(),
        };
        let mut keys = clicks;
        for l in 0..cfg.layers {
            if cfg.ablation.click_encoding {
                let w = ClickEncoderVars::bind(g, store, &format!("l{l}.encode"))?;
                let enc = click_encoding::click_encode(g, &w, clicks, tokens, cfg.heads, LN_EPS)?;
                clicks = enc.clicks;
                fwd.cross_attention.extend(enc.cross_attention);
                fwd.self_attention.extend(enc.self_attention);
            }
            keys = match averaging {
                Some(p) => {
                    let ex = g.matmul(p, tokens)?;
                    g.concat_rows(&[clicks, ex])?
                }
                None => clicks,
            };
            let w = LabelAssignVars::bind(g, store, &format!("l{l}.assign"))?;
            let alpha = g.sigmoid(w.alpha_logit);
            let assigned = label_assignment::label_assign(
                g,
                &w,
                tokens,
                keys,
                &key_labels,
                &prep.auto_half,
                cfg.classes,
                alpha,
                cfg.ablation.label_copy,
            )?;
            fwd.assign_attention.push(assigned.attention);
            tokens = if cfg.stack_residual {
                let gain = g.param(store, store.id(&format!("l{l}.norm.gain"))?);
                let bias = g.param(store, store.id(&format!("l{l}.norm.bias"))?);
                let sum = g.add(tokens, assigned.tokens)?;
                g.layer_norm(sum, gain, bias, LN_EPS)?
            } else {
                assigned.tokens
            };
        }

        let logits_half = if cfg.ablation.label_copy {
            let w = g.param(store, store.id("head.w")?);
            let b = g.param(store, store.id("head.b")?);
            let z = g.matmul(tokens, w)?;
            g.add_row(z, b)?
        } else {
            // clicks (and exemplars) act as per-class classifiers
            let sim = g.matmul_nt(tokens, keys)?;
            let sim = g.scale(sim, 1.0 / (m as f64).sqrt());
            let sim = g.softmax_rows(sim);
            fwd.assign_attention.push(sim);
            let onehot = Tensor::from_fn(&[key_labels.len(), cfg.classes], |i| {
                (key_labels[i / cfg.classes] == i % cfg.classes) as u8 as f64
            });
            let onehot = g.input(onehot);
            let by_click = g.matmul(sim, onehot)?;
            let auto = Tensor::from_fn(&[prep.auto_half.len(), cfg.classes], |i| {
                (prep.auto_half[i / cfg.classes] == i % cfg.classes) as u8 as f64
            });
            let auto = g.input(auto);
            let a = g.param(store, store.id("head.alpha")?);
            let alpha = g.sigmoid(a);
            let keep = g.one_minus(alpha);
            let by_click = g.scale_by(by_click, alpha)?;
            let auto = g.scale_by(auto, keep)?;
            let blend = g.add(by_click, auto)?;
            let scale = g.param(store, store.id("head.scale")?);
            g.scale_by(blend, scale)?
        };
        fwd.logits = g.upsample2(logits_half, prep.half)?;
        Ok(fwd)
    }

    /// Mean pixelwise cross-entropy of the refined window against `gt`.
    pub(crate) fn loss_graph(&self, g: &mut Graph, prep: &Prepared, gt: &LabelMask) -> Result<Var> {
        let fwd = self.forward(g, prep)?;
        let w = prep.window;
        let mut targets = Vec::with_capacity(voxel_count(w.size()));
        for z in w.lo[2]..w.hi[2] {
            for y in w.lo[1]..w.hi[1] {
                for x in w.lo[0]..w.hi[0] {
                    targets.push(gt.get([x, y, z]) as usize);
                }
            }
        }
        g.cross_entropy(fwd.logits, &targets)
    }

    /// Mean cross-entropy of the refined window against `gt`.
    pub fn loss(&self, enc: &EncoderOutput, clicks: &ClickSet, gt: &LabelMask) -> Result<f64> {
        let prep = self.prepare(enc, &automatic_mask(enc), clicks)?;
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, &prep, gt)?;
        Ok(g.value(loss).item())
    }

    /// Like [`Refiner::loss`], and adds the parameter gradients of that loss
    /// to the gradients already held in the store.
    pub fn accumulate_gradients(&mut self, enc: &EncoderOutput, clicks: &ClickSet, gt: &LabelMask) -> Result<f64> {
        let prep = self.prepare(enc, &automatic_mask(enc), clicks)?;
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, &prep, gt)?;
        let value = g.value(loss).item();
        g.backward(loss, &mut self.params)?;
        Ok(value)
    }

    /// Full pass with every attention matrix kept.
    pub fn trace(&self, enc: &EncoderOutput, clicks: &ClickSet) -> Result<RefineTrace> {
        let auto = automatic_mask(enc);
        let prep = self.prepare(enc, &auto, clicks)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &prep)?;
        let window_logits = g.value(fwd.logits);
        let mut logits = enc.mask_logits.clone();
        let c = logits.cols();
        let size = prep.window.size();
        for (r, row) in window_logits.data().chunks(c).enumerate() {
            let local = crate::volume::voxel_coords(size, r);
            let p = [0, 1, 2].map(|a| local[a] + prep.window.lo[a]);
            let i = voxel_index(enc.dims, p);
            logits.data_mut()[i * c..(i + 1) * c].copy_from_slice(row);
        }
        let collect = |vars: &[Var]| vars.iter().map(|&v| g.value(v).clone()).collect();
        Ok(RefineTrace {
            window: prep.window,
            cross_attention: collect(&fwd.cross_attention),
            self_attention: collect(&fwd.self_attention),
            assign_attention: collect(&fwd.assign_attention),
            logits,
        })
    }

    /// Full-resolution logits `[H·W·D × C]` for a non-empty click set.
    /// Voxels outside the refinement window keep the encoder logits.
    pub fn refine_forward(&self, enc: &EncoderOutput, clicks: &ClickSet) -> Result<Tensor> {
        Ok(self.trace(enc, clicks)?.logits)
    }

    /// Refined label mask; with no clicks this is the automatic mask.
    pub fn refine(&self, enc: &EncoderOutput, clicks: &ClickSet) -> Result<LabelMask> {
        if clicks.is_empty() {
            return Ok(automatic_mask(enc));
        }
        let logits = self.refine_forward(enc, clicks)?;
        LabelMask::from_indices(enc.dims, enc.classes, &logits.argmax_rows())
    }

    /// Runs the click-encoding block of `layer` on explicit inputs.
    pub fn click_encode(&self, layer: usize, clicks: &Tensor, tokens: &Tensor) -> Result<ClickEncoding> {
        if !self.config.ablation.click_encoding {
            return Ok(ClickEncoding {
                clicks: clicks.clone(),
                cross_out: Tensor::zeros(clicks.shape()),
                cross_attention: Vec::new(),
                self_attention: Vec::new(),
            });
        }
        let mut g = Graph::new();
        let c = g.input(clicks.clone());
        let t = g.input(tokens.clone());
        let w = ClickEncoderVars::bind(&mut g, &self.params, &format!("l{layer}.encode"))?;
        let enc = click_encoding::click_encode(&mut g, &w, c, t, self.config.heads, LN_EPS)?;
        let collect = |vars: &[Var]| vars.iter().map(|&v| g.value(v).clone()).collect();
        Ok(ClickEncoding {
            clicks: g.value(enc.clicks).clone(),
            cross_out: g.value(enc.cross_out).clone(),
            cross_attention: collect(&enc.cross_attention),
            self_attention: collect(&enc.self_attention),
        })
    }

    /// Runs the label-assignment module of `layer` on explicit inputs.
    /// `alpha` overrides the learned blend weight when given.
    pub fn label_assign(
        &self,
        layer: usize,
        tokens: &Tensor,
        clicks: &Tensor,
        click_labels: &[usize],
        auto_labels: &[usize],
        alpha: Option<f64>,
    ) -> Result<LabelAssignment> {
        if click_labels.len() != clicks.rows() || auto_labels.len() != tokens.rows() {
            return Err(Error::shape(
                "label_assign labels",
                &[clicks.rows(), tokens.rows()],
                &[click_labels.len(), auto_labels.len()],
            ));
        }
        let mut g = Graph::new();
        let t = g.input(tokens.clone());
        let c = g.input(clicks.clone());
        let w = LabelAssignVars::bind(&mut g, &self.params, &format!("l{layer}.assign"))?;
        let alpha = match alpha {
            Some(a) => g.input(Tensor::scalar(a)),
            None => g.sigmoid(w.alpha_logit),
        };
        let out = label_assignment::label_assign(
            &mut g,
            &w,
            t,
            c,
            click_labels,
            auto_labels,
            self.config.classes,
            alpha,
            self.config.ablation.label_copy,
        )?;
        Ok(LabelAssignment {
            tokens: g.value(out.tokens).clone(),
            attention: g.value(out.attention).clone(),
        })
    }

    /// Category embeddings `φ(one-hot(c))` of `layer`, one row per class.
    pub fn class_embeddings(&self, layer: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = LabelAssignVars::bind(&mut g, &self.params, &format!("l{layer}.assign"))?;
        let t = label_assignment::class_table(&mut g, &w, self.config.classes)?;
        Ok(g.value(t).clone())
    }
}
