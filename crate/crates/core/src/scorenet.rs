//! Noise-prediction network `eps_theta(x, i)`.
//!
//! The network is a message-passing stack over a fully connected bead graph.
//! Node inputs are a learned per-bead embedding concatenated with the
//! normalized noise level `i / L`; edge inputs are difference vectors
//! `x_j - x_k` and their squared norm. In conservative mode every node emits a
//! scalar, the scalars are summed to an energy, and the noise prediction is
//! the exact positional gradient of that energy. The gradient is written out
//! layer by layer as forward tape operations, so the parameter gradient of a
//! loss on `eps_theta` is one reverse sweep of the tape.
//!
//! The energy carries an output scale `sqrt(1 - abar_i)`, so
//! `-eps_theta / sqrt(1 - abar_i)` (the score) is the gradient of an unscaled
//! network output.
//!
//! With `anchored = true` an extra virtual node pinned at the origin joins the
//! graph. This is how single-particle systems in an external field are
//! modelled; translation invariance is then intentionally lost while rotation
//! symmetry about the origin is still expressible.

use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_beads: usize,
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_features")]
    pub n_features: usize,
    /// Number of noise levels `L`.
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_true")]
    pub conservative: bool,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    /// Adds a virtual node fixed at the origin.
    #[serde(default)]
    pub anchored: bool,
}

fn default_layers() -> usize {
    2
}
fn default_features() -> usize {
    32
}
fn default_levels() -> usize {
    1000
}
fn default_true() -> bool {
    true
}
fn default_embed() -> usize {
    8
}

impl ModelConfig {
    pub fn new(n_beads: usize, dim: usize) -> Self {
        Self {
            n_beads,
            dim,
            n_layers: default_layers(),
            n_features: default_features(),
            levels: default_levels(),
            conservative: true,
            embed_dim: default_embed(),
            anchored: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_beads == 0 {
            return Err(invalid("n_beads must be >= 1"));
        }
        if !(1..=3).contains(&self.dim) {
            return Err(invalid(format!("dim must be 1, 2 or 3, got {}", self.dim)));
        }
        if self.n_layers == 0 || self.n_features == 0 || self.embed_dim == 0 {
            return Err(invalid("n_layers, n_features and embed_dim must be >= 1"));
        }
        if self.levels == 0 {
            return Err(invalid("levels must be >= 1"));
        }
        Ok(())
    }

    /// Graph nodes per configuration, including the anchor.
    pub fn n_nodes(&self) -> usize {
        self.n_beads + usize::from(self.anchored)
    }

    /// Length of one flattened configuration.
    pub fn coords(&self) -> usize {
        self.n_beads * self.dim
    }
}

/// Named block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
    total: usize,
}

impl ParamLayout {
    fn new(cfg: &ModelConfig) -> Self {
        let f = cfg.n_features;
        let mut shapes: Vec<(String, usize, usize)> = vec![
            ("embeddings".into(), cfg.n_nodes(), cfg.embed_dim),
            ("input.w".into(), cfg.embed_dim + 1, f),
            ("input.b".into(), 1, f),
        ];
        for l in 0..cfg.n_layers {
            shapes.push((format!("layer{l}.edge"), cfg.dim + 1, f));
            shapes.push((format!("layer{l}.send"), f, f));
            shapes.push((format!("layer{l}.recv"), f, f));
            shapes.push((format!("layer{l}.msg_b"), 1, f));
            shapes.push((format!("layer{l}.update"), f, f));
            shapes.push((format!("layer{l}.update_b"), 1, f));
            shapes.push((format!("layer{l}.gate_send"), f, f));
            shapes.push((format!("layer{l}.gate_recv"), f, f));
            shapes.push((format!("layer{l}.gate_b"), 1, f));
            shapes.push((format!("layer{l}.filter"), cfg.dim + 1, f));
        }
        shapes.push(("head.w".into(), f, f));
        shapes.push(("head.b".into(), 1, f));
        if cfg.conservative {
            shapes.push(("readout".into(), f, 1));
        } else {
            shapes.push(("vector".into(), f, cfg.dim));
        }
        let mut offset = 0;
        let blocks = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let b = ParamBlock {
                    name,
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                b
            })
            .collect();
        Self {
            blocks,
            total: offset,
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Anything that predicts diffusion noise for a batch of configurations.
pub trait NoisePredictor: Sync {
    fn schedule(&self) -> &NoiseSchedule;
    fn n_beads(&self) -> usize;
    fn dim(&self) -> usize;
    /// `xs` holds `levels.len()` flattened configurations back to back.
    fn predict_noise_batch(&self, xs: &[f64], levels: &[usize]) -> Result<Vec<f64>>;

    fn coords(&self) -> usize {
        self.n_beads() * self.dim()
    }

    fn predict_noise(&self, x: &[f64], level: usize) -> Result<Vec<f64>> {
        self.predict_noise_batch(x, &[level])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    config: ModelConfig,
    schedule: NoiseSchedule,
    layout: ParamLayout,
    params: Vec<f64>,
}

struct Graph {
    n_rows: usize,
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    node_kind: Rc<[usize]>,
    bead_rows: Rc<[usize]>,
    sample_of_node: Rc<[usize]>,
}

struct Forward {
    tape: Tape,
    eps: Var,
    energy: Option<Var>,
}

impl ScoreModel {
    /// Fresh model with fan-in scaled Gaussian weights, zero biases and
    /// `0.1 * N(0, 1)` embeddings. Conservative models zero the weights on
    /// the raw edge vector.
    pub fn new(config: ModelConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        if schedule.len() != config.levels {
            return Err(invalid(format!(
                "schedule has {} levels but config expects {}",
                schedule.len(),
                config.levels
            )));
        }
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total()];
        for b in layout.blocks() {
            let dst = &mut params[b.offset..b.offset + b.len()];
            if b.name == "embeddings" {
                dst.iter_mut()
                    .for_each(|p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *p = 0.1 * z
                    });
            } else if b.rows > 1 {
                let scale = 1.0 / (b.rows as f64).sqrt();
                dst.iter_mut().for_each(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p = scale * z
                });
            }
            // A conservative model starts rotation-invariant: only the squared
            // edge length feeds the first messages.
            if config.conservative && (b.name.ends_with(".edge") || b.name.ends_with(".filter")) {
                dst[..config.dim * b.cols].fill(0.0);
            }
        }
        Ok(Self {
            config,
            schedule,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    /// Learned node embeddings, one row per graph node.
    pub fn embeddings(&self) -> Array2<f64> {
        self.block_array(&self.layout.blocks[0])
    }

    fn block_array(&self, b: &ParamBlock) -> Array2<f64> {
        Array2::from_shape_vec(
            (b.rows, b.cols),
            self.params[b.offset..b.offset + b.len()].to_vec(),
        )
        .expect("layout shape")
    }

    fn check_inputs(&self, xs: &[f64], levels: &[usize]) -> Result<()> {
        let c = self.config.coords();
        if xs.len() != c * levels.len() {
            return Err(invalid(format!(
                "expected {} coordinates for {} configurations, got {}",
                c * levels.len(),
                levels.len(),
                xs.len()
            )));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(invalid("configuration contains non-finite values"));
        }
        levels
            .iter()
            .try_for_each(|&l| self.schedule.check_level(l))
    }

    fn graph(&self, batch: usize) -> Graph {
        let nn = self.config.n_nodes();
        let nb = self.config.n_beads;
        let mut src = Vec::with_capacity(batch * nn * nn.saturating_sub(1));
        let mut dst = Vec::with_capacity(src.capacity());
        let mut node_kind = Vec::with_capacity(batch * nn);
        let mut bead_rows = Vec::with_capacity(batch * nb);
        let mut sample_of_node = Vec::with_capacity(batch * nn);
        for b in 0..batch {
            let base = b * nn;
            for j in 0..nn {
                node_kind.push(j);
                sample_of_node.push(b);
                if j < nb {
                    bead_rows.push(base + j);
                }
                for k in 0..nn {
                    if j != k {
                        src.push(base + j);
                        dst.push(base + k);
                    }
                }
            }
        }
        Graph {
            n_rows: batch * nn,
            src: src.into(),
            dst: dst.into(),
            node_kind: node_kind.into(),
            bead_rows: bead_rows.into(),
            sample_of_node: sample_of_node.into(),
        }
    }

    fn forward(&self, xs: &[f64], levels: &[usize], trainable: bool, want_energy: bool) -> Forward {
        let cfg = &self.config;
        let (nn, nb, d) = (cfg.n_nodes(), cfg.n_beads, cfg.dim);
        let batch = levels.len();
        let g = self.graph(batch);
        let mut t = Tape::new();

        let mut slot = 0;
        let mut next = |t: &mut Tape, this: &Self| {
            let b = &this.layout.blocks[slot];
            let a = this.block_array(b);
            let v = if trainable { t.param(a, slot) } else { t.constant(a) };
            slot += 1;
            v
        };

        let mut pos = Array2::zeros((g.n_rows, d));
        let mut level_feat = Array2::zeros((g.n_rows, 1));
        let mut out_scale = Array2::zeros((g.n_rows, 1));
        for (b, &lvl) in levels.iter().enumerate() {
            for j in 0..nb {
                for c in 0..d {
                    pos[[b * nn + j, c]] = xs[(b * nb + j) * d + c];
                }
            }
            for j in 0..nn {
                level_feat[[b * nn + j, 0]] = lvl as f64 / cfg.levels as f64;
                out_scale[[b * nn + j, 0]] = self.schedule.noise_scale(lvl);
            }
        }
        let bead_scale = out_scale.select(ndarray::Axis(0), &g.bead_rows);

        let emb = next(&mut t, self);
        let w_in = next(&mut t, self);
        let b_in = next(&mut t, self);

        let x = t.constant(pos);
        let xs_src = t.gather(x, &g.src);
        let xs_dst = t.gather(x, &g.dst);
        let diff = t.sub(xs_src, xs_dst);
        let sq = t.mul(diff, diff);
        let sq = t.row_sum(sq);
        let edge = t.concat_cols(diff, sq);

        let lf = t.constant(level_feat);
        let h_emb = t.gather(emb, &g.node_kind);
        let a0 = t.concat_cols(h_emb, lf);
        let h0 = t.matmul(a0, w_in);
        let mut h = t.add_row(h0, b_in);

        let inv_deg = if nn > 1 { 1.0 / (nn - 1) as f64 } else { 0.0 };
        struct LayerCache {
            w_edge: Var,
            w_send: Var,
            w_recv: Var,
            w_upd: Var,
            w_gsend: Var,
            w_grecv: Var,
            w_filter: Var,
            pre_msg: Var,
            pre_gate: Var,
            gate: Var,
            filter: Var,
            pre_upd: Var,
        }
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let w_edge = next(&mut t, self);
            let w_send = next(&mut t, self);
            let w_recv = next(&mut t, self);
            let b_msg = next(&mut t, self);
            let w_upd = next(&mut t, self);
            let b_upd = next(&mut t, self);
            let w_gsend = next(&mut t, self);
            let w_grecv = next(&mut t, self);
            let b_gate = next(&mut t, self);
            let w_filter = next(&mut t, self);

            let pe = t.matmul(edge, w_edge);
            let hs = t.matmul(h, w_send);
            let hs = t.gather(hs, &g.src);
            let hr = t.matmul(h, w_recv);
            let hr = t.gather(hr, &g.dst);
            let p = t.add(pe, hs);
            let p = t.add(p, hr);
            let pre_msg = t.add_row(p, b_msg);
            let msg = t.act(pre_msg);
            // pair-gated linear filter of the edge inputs
            let gs = t.matmul(h, w_gsend);
            let gs = t.gather(gs, &g.src);
            let gr = t.matmul(h, w_grecv);
            let gr = t.gather(gr, &g.dst);
            let pg = t.add(gs, gr);
            let pre_gate = t.add_row(pg, b_gate);
            let gate = t.act(pre_gate);
            let filter = t.matmul(edge, w_filter);
            let gated = t.mul(gate, filter);
            let msg = t.add(msg, gated);
            let agg = t.scatter_add(msg, &g.src, g.n_rows);
            let agg = t.scale(agg, inv_deg);
            let u = t.matmul(agg, w_upd);
            let pre_upd = t.add_row(u, b_upd);
            let upd = t.act(pre_upd);
            h = t.add(h, upd);
            caches.push(LayerCache {
                w_edge,
                w_send,
                w_recv,
                w_upd,
                w_gsend,
                w_grecv,
                w_filter,
                pre_msg,
                pre_gate,
                gate,
                filter,
                pre_upd,
            });
        }

        let w_head = next(&mut t, self);
        let b_head = next(&mut t, self);
        let z = t.matmul(h, w_head);
        let pre_head = t.add_row(z, b_head);
        let y = t.act(pre_head);
        let w_out = next(&mut t, self);

        if !cfg.conservative {
            let v = t.matmul(y, w_out);
            let v = t.gather(v, &g.bead_rows);
            let s = t.constant(bead_scale);
            let eps = t.mul_col(v, s);
            return Forward {
                tape: t,
                eps,
                energy: None,
            };
        }

        let scale = t.constant(out_scale);
        let energy = if want_energy {
            let s = t.matmul(y, w_out);
            let s = t.mul(s, scale);
            Some(t.scatter_add(s, &g.sample_of_node.clone(), batch))
        } else {
            None
        };

        // d energy / d positions, spelled out as forward operations
        let gy = t.matmul_t(scale, w_out);
        let dact = t.act_d1(pre_head);
        let gz = t.mul(gy, dact);
        let mut gh = t.matmul_t(gz, w_head);
        let mut gpos: Option<Var> = None;
        for c in caches.iter().rev() {
            let dact = t.act_d1(c.pre_upd);
            let gu = t.mul(gh, dact);
            let gagg = t.matmul_t(gu, c.w_upd);
            let gm = t.gather(gagg, &g.src);
            let gm = t.scale(gm, inv_deg);
            let dact = t.act_d1(c.pre_msg);
            let gp = t.mul(gm, dact);

            let gp_src = t.scatter_add(gp, &g.src, g.n_rows);
            let gh_send = t.matmul_t(gp_src, c.w_send);
            let gp_dst = t.scatter_add(gp, &g.dst, g.n_rows);
            let gh_recv = t.matmul_t(gp_dst, c.w_recv);
            let acc = t.add(gh, gh_send);
            gh = t.add(acc, gh_recv);

            let gg = t.mul(gm, c.filter);
            let dgate = t.act_d1(c.pre_gate);
            let gg = t.mul(gg, dgate);
            let gg_src = t.scatter_add(gg, &g.src, g.n_rows);
            let gh_gsend = t.matmul_t(gg_src, c.w_gsend);
            let gg_dst = t.scatter_add(gg, &g.dst, g.n_rows);
            let gh_grecv = t.matmul_t(gg_dst, c.w_grecv);
            let acc = t.add(gh, gh_gsend);
            gh = t.add(acc, gh_grecv);

            let gf = t.mul(gm, c.gate);
            let gedge = t.matmul_t(gp, c.w_edge);
            let gedge_f = t.matmul_t(gf, c.w_filter);
            let gedge = t.add(gedge, gedge_f);
            let gdiff = t.slice_cols(gedge, 0, d);
            let gsq = t.slice_cols(gedge, d, 1);
            let gsq = t.scale(gsq, 2.0);
            let radial = t.mul_col(diff, gsq);
            let gdiff = t.add(gdiff, radial);
            let to_src = t.scatter_add(gdiff, &g.src, g.n_rows);
            let to_dst = t.scatter_add(gdiff, &g.dst, g.n_rows);
            let gl = t.sub(to_src, to_dst);
            gpos = Some(match gpos {
                Some(prev) => t.add(prev, gl),
                None => gl,
            });
        }
        let gpos = gpos.expect("at least one layer");
        let eps = t.gather(gpos, &g.bead_rows);
        Forward {
            tape: t,
            eps,
            energy,
        }
    }

    /// Scalar network energy `nn_theta(x, i)` for each configuration.
    pub fn energy_batch(&self, xs: &[f64], levels: &[usize]) -> Result<Vec<f64>> {
        self.check_inputs(xs, levels)?;
        if !self.config.conservative {
            return Err(crate::error::DffError::Unsupported(
                "non-conservative models have no scalar energy".into(),
            ));
        }
        let f = self.forward(xs, levels, false, true);
        Ok(f.tape.value(f.energy.expect("energy requested")).iter().copied().collect())
    }

    pub fn energy(&self, x: &[f64], level: usize) -> Result<f64> {
        Ok(self.energy_batch(x, &[level])?[0])
    }

    /// `-eps / sqrt(1 - abar_i)`.
    pub fn score(&self, x: &[f64], level: usize) -> Result<Vec<f64>> {
        score(self, x, level)
    }

    /// `-(kT / sqrt(1 - abar_i)) * eps`.
    pub fn dff_force(&self, x: &[f64], level: usize, kt: f64) -> Result<Vec<f64>> {
        dff_force(self, x, level, kt)
    }

    /// Weighted regression of the noise prediction onto `targets`:
    /// `sum_b w_b |eps_theta(x_b, i_b) - target_b|^2 / B`, with its exact
    /// gradient in flat-parameter order.
    pub fn regression_loss_grad(
        &self,
        xs: &[f64],
        levels: &[usize],
        targets: &[f64],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(xs, levels)?;
        if targets.len() != xs.len() || weights.len() != levels.len() {
            return Err(invalid("targets/weights do not match the batch"));
        }
        let batch = levels.len();
        let Forward { mut tape, eps, .. } = self.forward(xs, levels, true, false);
        let coords = self.config.coords();
        let (nb, d) = (self.config.n_beads, self.config.dim);
        let target = Array2::from_shape_vec((batch * nb, d), targets.to_vec()).expect("shape");
        let mut w = Array2::zeros((batch * nb, 1));
        for (b, &wb) in weights.iter().enumerate() {
            for j in 0..nb {
                w[[b * nb + j, 0]] = wb;
            }
        }
        debug_assert_eq!(target.len(), batch * coords);
        let target = tape.constant(target);
        let w = tape.constant(w);
        let r = tape.sub(eps, target);
        let r2 = tape.mul(r, r);
        let r2 = tape.mul_col(r2, w);
        let total = tape.sum_all(r2);
        let loss = tape.scale(total, 1.0 / batch as f64);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        let mut flat = vec![0.0; self.params.len()];
        for (b, g) in self.layout.blocks.iter().zip(grads) {
            if let Some(g) = g {
                flat[b.offset..b.offset + b.len()]
                    .iter_mut()
                    .zip(g.iter())
                    .for_each(|(f, v)| *f = *v);
            }
        }
        Ok((value, flat))
    }
}

impl NoisePredictor for ScoreModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn n_beads(&self) -> usize {
        self.config.n_beads
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn predict_noise_batch(&self, xs: &[f64], levels: &[usize]) -> Result<Vec<f64>> {
        self.check_inputs(xs, levels)?;
        if levels.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.forward(xs, levels, false, false);
        Ok(f.tape.value(f.eps).iter().copied().collect())
    }
}

pub fn score<P: NoisePredictor + ?Sized>(model: &P, x: &[f64], level: usize) -> Result<Vec<f64>> {
    let eps = model.predict_noise(x, level)?;
    let s = model.schedule().noise_scale(level);
    Ok(eps.into_iter().map(|e| -e / s).collect())
}

pub fn dff_force<P: NoisePredictor + ?Sized>(
    model: &P,
    x: &[f64],
    level: usize,
    kt: f64,
) -> Result<Vec<f64>> {
    if !(kt > 0.0 && kt.is_finite()) {
        return Err(invalid(format!("kT must be positive, got {kt}")));
    }
    let eps = model.predict_noise(x, level)?;
    let s = model.schedule().noise_scale(level);
    Ok(eps.into_iter().map(|e| -(kt * e) / s).collect())
}

/// Batched [`dff_force`] with one level for the whole batch.
pub fn dff_force_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    xs: &[f64],
    level: usize,
    kt: f64,
) -> Result<Vec<f64>> {
    if !(kt > 0.0 && kt.is_finite()) {
        return Err(invalid(format!("kT must be positive, got {kt}")));
    }
    let n = xs.len() / model.coords().max(1);
    let eps = model.predict_noise_batch(xs, &vec![level; n])?;
    let s = model.schedule().noise_scale(level);
    Ok(eps.into_iter().map(|e| -(kt * e) / s).collect())
}

/// Proper rotation in 1, 2 or 3 dimensions (row-major, 3x3 storage).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    dim: usize,
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub fn identity(dim: usize) -> Self {
        let mut m = [[0.0; 3]; 3];
        (0..3).for_each(|k| m[k][k] = 1.0);
        Self { dim, m }
    }

    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let mut r = Self::identity(2);
        r.m[0] = [c, -s, 0.0];
        r.m[1] = [s, c, 0.0];
        r
    }

    /// From a unit quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let [w, x, y, z] = q;
        let m = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - z * w),
                2.0 * (x * z + y * w),
            ],
            [
                2.0 * (x * y + z * w),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - x * w),
            ],
            [
                2.0 * (x * z - y * w),
                2.0 * (y * z + x * w),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        Self { dim: 3, m }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.m[r][c]
    }

    pub fn inverse(&self) -> Self {
        let mut t = *self;
        for r in 0..3 {
            for c in 0..3 {
                t.m[r][c] = self.m[c][r];
            }
        }
        t
    }

    pub fn determinant(&self) -> f64 {
        match self.dim {
            1 => self.m[0][0],
            2 => self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0],
            _ => {
                let m = &self.m;
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        }
    }

    /// Rotates every `dim`-vector of a flattened configuration in place.
    pub fn apply(&self, xs: &mut [f64]) {
        let d = self.dim;
        let mut tmp = [0.0; 3];
        for v in xs.chunks_exact_mut(d) {
            for (r, t) in tmp.iter_mut().enumerate().take(d) {
                *t = (0..d).map(|c| self.m[r][c] * v[c]).sum();
            }
            v.copy_from_slice(&tmp[..d]);
        }
    }

    pub fn rotated(&self, xs: &[f64]) -> Vec<f64> {
        let mut out = xs.to_vec();
        self.apply(&mut out);
        out
    }
}

/// Uniform draw from SO(dim); identity in one dimension.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Rotation> {
    match dim {
        1 => Ok(Rotation::identity(1)),
        2 => Ok(Rotation::from_angle(
            rng.random::<f64>() * std::f64::consts::TAU,
        )),
        3 => {
            let mut q = [0.0; 4];
            let norm = loop {
                for v in q.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-12 {
                    break n;
                }
            };
            q.iter_mut().for_each(|v| *v /= norm);
            Ok(Rotation::from_quaternion(q))
        }
        _ => Err(invalid(format!("no rotations for dim {dim}"))),
    }
}

/// `|eps(x) - R^-1 eps(R x)|^2 / |eps(x)|^2`, or 0 when `eps(x)` vanishes.
pub fn equivariance_error<P: NoisePredictor + ?Sized>(
    model: &P,
    x: &[f64],
    level: usize,
    rot: &Rotation,
) -> Result<f64> {
    if rot.dim() != model.dim() {
        return Err(invalid("rotation dimension does not match the model"));
    }
    let eps = model.predict_noise(x, level)?;
    let mut back = model.predict_noise(&rot.rotated(x), level)?;
    rot.inverse().apply(&mut back);
    let denom: f64 = eps.iter().map(|e| e * e).sum();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let num: f64 = eps.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(num / denom)
}
