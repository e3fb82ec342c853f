//! The model: set-abstraction descriptor encoders, angular embeddings,
//! offset attention with intra-/inter-frame alignment, attention-based
//! feature integration, the correspondence map and registration loss, and a
//! classification head.

mod attention;
mod checkpoint;
mod encoder;
mod loss;

pub use attention::{
    afi, angular_embedding, cosine_lr, iac, ias, offset_attention, AitBlockParams, AttnProj,
    OffsetNorm,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use encoder::{
    build_geometry, encode_branch, EncoderGeometry, EncoderParams, GeometryError, SamplingPlan,
};
pub use loss::{correspondence_map, registration_loss, registration_loss_single, RegistrationParams};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Shape, Tape, Tensor};
use crate::seeds;

/// Negative slope shared by every MLP activation in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Architecture and attention switches. Field defaults follow the reference
/// training setup; the ablation flags mirror the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_points: usize,
    pub sa1_size: usize,
    pub sa2_size: usize,
    pub width1: usize,
    pub width2: usize,
    pub k_group: usize,
    pub k_lrf: usize,
    pub attn_dim: usize,
    pub ait_blocks: usize,
    pub t_alpha: f64,
    pub temperature: f64,
    pub proj_dim: usize,
    pub n_classes: usize,
    pub offset_norm: OffsetNorm,
    pub use_e_sa: bool,
    pub use_e_ca: bool,
    pub sa_on_global: bool,
    pub sequential_attn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_points: 1024,
            sa1_size: 512,
            sa2_size: 128,
            width1: 128,
            width2: 256,
            k_group: 32,
            k_lrf: 32,
            attn_dim: 64,
            ait_blocks: 2,
            t_alpha: 15.0,
            temperature: 0.017,
            proj_dim: 64,
            n_classes: 8,
            offset_norm: OffsetNorm::Pct,
            use_e_sa: true,
            use_e_ca: true,
            sa_on_global: false,
            sequential_attn: false,
        }
    }
}

/// A dense weight matrix (or bias row) with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    /// Xavier-uniform initialization.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            data: (0..rows * cols)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect(),
            rows,
            cols,
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(&[self.rows, self.cols])
    }

    /// Put this parameter on a tape as a learnable leaf.
    pub fn leaf(&self, tape: &mut Tape, requires_grad: bool) -> Result<Tensor, AdError> {
        tape.leaf(self.data.clone(), self.shape(), requires_grad)
    }
}

/// Linear layer weights; bias is a broadcast row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::glorot(inputs, outputs, rng),
            bias: Param::zeros(1, outputs),
        }
    }
}

/// Shared MLP: Linear + leaky ReLU stack, last layer optionally linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
}

impl Mlp {
    pub fn init(dims: &[usize], activate_last: bool, rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activate_last,
        }
    }

    /// Forward on the tape with parameters registered through `reg`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        reg: &mut ParamBinder,
        x: Tensor,
    ) -> Result<Tensor, AdError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = reg.bind(tape, &layer.weight)?;
            let b = reg.bind(tape, &layer.bias)?;
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if i < last || self.activate_last {
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }
}

/// Learnable weights for the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder_local: EncoderParams,
    pub encoder_global: EncoderParams,
    pub blocks: Vec<AitBlockParams>,
    pub registration: RegistrationParams,
    pub classifier: Mlp,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = seeds::stream(seed, 0x1417, 0, 0);
        let blocks = (0..config.ait_blocks)
            .map(|_| AitBlockParams::init(config, &mut rng))
            .collect();
        let hidden = (config.width2 / 2).max(config.n_classes);
        Self {
            encoder_local: EncoderParams::init(config, &mut rng),
            encoder_global: EncoderParams::init(config, &mut rng),
            blocks,
            registration: RegistrationParams::init(config, &mut rng),
            classifier: Mlp::init(&[config.width2, hidden, config.n_classes], false, &mut rng),
        }
    }

    /// Visit every parameter in a stable order with a stable name.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Param)) {
        self.for_each(|name, p| f(name, p));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Param)) {
        // Mirrors `for_each`; kept in sync by the shared traversal below.
        let mut names = Vec::new();
        self.for_each(|name, _| names.push(name));
        let mut idx = 0;
        self.for_each_mut(|p| {
            f(names[idx].clone(), p);
            idx += 1;
        });
    }

    fn for_each<'a>(&'a self, mut f: impl FnMut(String, &'a Param)) {
        let mlp = |tag: &str, m: &'a Mlp, f: &mut dyn FnMut(String, &'a Param)| {
            for (i, l) in m.layers.iter().enumerate() {
                f(format!("{tag}.l{i}.w"), &l.weight);
                f(format!("{tag}.l{i}.b"), &l.bias);
            }
        };
        let proj = |tag: &str, p: &'a AttnProj, f: &mut dyn FnMut(String, &'a Param)| {
            f(format!("{tag}.wq"), &p.wq);
            f(format!("{tag}.wk"), &p.wk);
            f(format!("{tag}.wv"), &p.wv);
            f(format!("{tag}.walpha"), &p.walpha);
        };
        mlp("enc_l.s1", &self.encoder_local.stage1, &mut f);
        mlp("enc_l.s2", &self.encoder_local.stage2, &mut f);
        mlp("enc_g.s1", &self.encoder_global.stage1, &mut f);
        mlp("enc_g.s2", &self.encoder_global.stage2, &mut f);
        for (b, block) in self.blocks.iter().enumerate() {
            proj(&format!("b{b}.ias.proj"), &block.ias_proj, &mut f);
            mlp(&format!("b{b}.ias.phi"), &block.ias_phi, &mut f);
            proj(&format!("b{b}.gias.proj"), &block.global_ias_proj, &mut f);
            mlp(&format!("b{b}.gias.phi"), &block.global_ias_phi, &mut f);
            proj(&format!("b{b}.afi.sa"), &block.afi_self, &mut f);
            proj(&format!("b{b}.afi.ca"), &block.afi_cross, &mut f);
            mlp(&format!("b{b}.afi.phi"), &block.afi_phi, &mut f);
            mlp(&format!("b{b}.afi.phi_sa"), &block.afi_phi_self, &mut f);
            mlp(&format!("b{b}.afi.phi_ca"), &block.afi_phi_cross, &mut f);
        }
        mlp("reg.phi1", &self.registration.phi1, &mut f);
        mlp("reg.phi2", &self.registration.phi2, &mut f);
        mlp("cls", &self.classifier, &mut f);
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut Param)) {
        let mlp = |m: &mut Mlp, f: &mut dyn FnMut(&mut Param)| {
            for l in &mut m.layers {
                f(&mut l.weight);
                f(&mut l.bias);
            }
        };
        let proj = |p: &mut AttnProj, f: &mut dyn FnMut(&mut Param)| {
            f(&mut p.wq);
            f(&mut p.wk);
            f(&mut p.wv);
            f(&mut p.walpha);
        };
        mlp(&mut self.encoder_local.stage1, &mut f);
        mlp(&mut self.encoder_local.stage2, &mut f);
        mlp(&mut self.encoder_global.stage1, &mut f);
        mlp(&mut self.encoder_global.stage2, &mut f);
        for block in &mut self.blocks {
            proj(&mut block.ias_proj, &mut f);
            mlp(&mut block.ias_phi, &mut f);
            proj(&mut block.global_ias_proj, &mut f);
            mlp(&mut block.global_ias_phi, &mut f);
            proj(&mut block.afi_self, &mut f);
            proj(&mut block.afi_cross, &mut f);
            mlp(&mut block.afi_phi, &mut f);
            mlp(&mut block.afi_phi_self, &mut f);
            mlp(&mut block.afi_phi_cross, &mut f);
        }
        mlp(&mut self.registration.phi1, &mut f);
        mlp(&mut self.registration.phi2, &mut f);
        mlp(&mut self.classifier, &mut f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, p| n += p.data.len());
        n
    }
}

/// Tracks which tape leaf each parameter was bound to in the current forward
/// pass, so gradients can be read back after `backward`. Keys are parameter
/// addresses; the `ModelParams` must stay in place between binding and
/// gradient collection (one training step).
pub struct ParamBinder {
    bindings: Vec<(*const Param, Tensor)>,
    trainable: bool,
}

impl ParamBinder {
    pub fn new(trainable: bool) -> Self {
        Self {
            bindings: Vec::new(),
            trainable,
        }
    }

    /// Bind a parameter to the tape (once per tape; later calls reuse the
    /// same leaf so fan-out gradients accumulate correctly).
    pub fn bind(&mut self, tape: &mut Tape, p: &Param) -> Result<Tensor, AdError> {
        let key = p as *const Param;
        if let Some(&(_, t)) = self.bindings.iter().find(|(k, _)| *k == key) {
            return Ok(t);
        }
        let t = p.leaf(tape, self.trainable)?;
        self.bindings.push((key, t));
        Ok(t)
    }

    /// Tape gradients in `visit` order, `None` where a parameter was never
    /// bound or received no gradient.
    pub fn grads_in_visit_order(
        &self,
        tape: &Tape,
        params: &ModelParams,
    ) -> Vec<Option<Vec<f64>>> {
        let mut out = Vec::new();
        params.visit(|_, p| {
            let key = p as *const Param;
            let g = self
                .bindings
                .iter()
                .find(|(k, _)| *k == key)
                .and_then(|&(_, t)| tape.grad(t).map(|g| g.to_vec()));
            out.push(g);
        });
        out
    }
}

/// SGD with momentum, decoupled-from-nothing classic weight decay, and a
/// cosine-annealed learning rate.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Cosine annealing from the base lr to ~0 across `total` epochs.
    pub fn epoch_lr(&self, epoch: usize, total: usize) -> f64 {
        cosine_lr(self.lr, epoch, total)
    }

    /// Apply one step. `grads[i]` pairs with the i-th parameter in
    /// `visit_mut` order; missing gradients leave the parameter untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Vec<f64>>], lr_now: f64) {
        let mut idx = 0;
        if self.velocity.is_empty() {
            params.visit_mut(|_, p| self.velocity.push(vec![0.0; p.data.len()]));
        }
        let velocity = &mut self.velocity;
        let (momentum, weight_decay) = (self.momentum, self.weight_decay);
        params.visit_mut(|_, p| {
            if let Some(Some(g)) = grads.get(idx) {
                let v = &mut velocity[idx];
                for ((pv, &gv), vv) in p.data.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    let grad = gv + weight_decay * *pv;
                    *vv = momentum * *vv + grad;
                    *pv -= lr_now * *vv;
                }
            }
            idx += 1;
        });
    }
}

/// Everything the forward pass produces for one sample.
pub struct SampleForward {
    pub f_local: Tensor,
    pub f_global: Tensor,
    pub integrated: Tensor,
    pub logits: Tensor,
}

/// Run the full model on one sample's geometry. All samples of a batch share
/// one tape so the registration loss can couple them.
pub fn forward_sample(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    params: &ModelParams,
    config: &ModelConfig,
    geom: &EncoderGeometry,
) -> Result<SampleForward, AdError> {
    let f_local = encode_branch(tape, binder, &params.encoder_local, config, geom, true)?;
    let mut f_global = encode_branch(tape, binder, &params.encoder_global, config, geom, false)?;

    let n = config.sa2_size;
    let e_sa = if config.use_e_sa {
        let emb = angular_embedding(&geom.angles_self, config.attn_dim, config.t_alpha);
        Some(tape.constant(emb, [n * n, config.attn_dim])?)
    } else {
        None
    };
    let e_ca = if config.use_e_ca {
        let emb = angular_embedding(&geom.angles_cross, config.attn_dim, config.t_alpha);
        Some(tape.constant(emb, [n, config.attn_dim])?)
    } else {
        None
    };
    // The global branch shares one frame, so its pairwise angles are zero.
    let e_global = if config.sa_on_global && config.use_e_sa {
        let emb = angular_embedding(&vec![0.0; n * n], config.attn_dim, config.t_alpha);
        Some(tape.constant(emb, [n * n, config.attn_dim])?)
    } else {
        None
    };

    let mut f = f_local;
    let mut integrated = f_local;
    for block in &params.blocks {
        if config.sa_on_global {
            f_global = ias(
                tape,
                binder,
                f_global,
                e_global,
                &block.global_ias_proj,
                &block.global_ias_phi,
                config.offset_norm,
            )?;
        }
        let aligned = ias(
            tape,
            binder,
            f,
            e_sa,
            &block.ias_proj,
            &block.ias_phi,
            config.offset_norm,
        )?;
        integrated = if config.sequential_attn {
            let mid = ias(
                tape,
                binder,
                aligned,
                e_sa,
                &block.afi_self,
                &block.afi_phi_self,
                config.offset_norm,
            )?;
            iac(
                tape,
                binder,
                mid,
                f_global,
                e_ca,
                &block.afi_cross,
                &block.afi_phi_cross,
                config.offset_norm,
            )?
        } else {
            afi(
                tape,
                binder,
                aligned,
                f_global,
                e_sa,
                e_ca,
                &block.afi_self,
                &block.afi_cross,
                &block.afi_phi,
                config.offset_norm,
            )?
        };
        f = integrated;
    }

    let logits = classify(tape, binder, &params.classifier, integrated)?;
    Ok(SampleForward {
        f_local,
        f_global,
        integrated,
        logits,
    })
}

/// Max-pool the integrated feature over points, then project to class
/// logits.
pub fn classify(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    classifier: &Mlp,
    u: Tensor,
) -> Result<Tensor, AdError> {
    let c = tape.shape(u).dims()[1];
    let pooled = tape.max_over_axis(u, 0)?;
    let row = tape.reshape(pooled, [1, c])?;
    classifier.forward(tape, binder, row)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_points: 32,
            sa1_size: 16,
            sa2_size: 8,
            width1: 12,
            width2: 16,
            k_group: 6,
            k_lrf: 8,
            attn_dim: 6,
            ait_blocks: 1,
            proj_dim: 8,
            n_classes: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn param_init_is_deterministic_and_visit_is_stable() {
        let config = tiny_config();
        let a = ModelParams::init(&config, 7);
        let b = ModelParams::init(&config, 7);
        assert_eq!(a, b);
        let c = ModelParams::init(&config, 8);
        assert_ne!(a, c);

        let mut names = Vec::new();
        a.visit(|n, _| names.push(n));
        let mut names2 = Vec::new();
        b.visit(|n, _| names2.push(n));
        assert_eq!(names, names2);
        // Names are unique.
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn visit_and_visit_mut_agree_on_order() {
        let config = tiny_config();
        let mut params = ModelParams::init(&config, 1);
        let mut shapes = Vec::new();
        params.visit(|_, p| shapes.push((p.rows, p.cols)));
        let mut shapes2 = Vec::new();
        params.visit_mut(|_, p| shapes2.push((p.rows, p.cols)));
        assert_eq!(shapes, shapes2);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let sgd = Sgd::new(0.01, 0.9, 1e-4);
        assert!((sgd.epoch_lr(0, 100) - 0.01).abs() < 1e-12);
        assert!(sgd.epoch_lr(50, 100) < 0.0051);
        assert!(sgd.epoch_lr(99, 100) < 1e-5);
    }
}
