//! The map network: a line token encoder, alternating self/cross
//! attention over point and line descriptor sets, and two regression
//! heads emitting 3D geometry plus a reliability logit per feature.

mod forward;

pub use forward::{
    forward, predict, reliability, ForwardVars, LinePrediction, PointPrediction, Prediction,
};

use crate::diffcore::{DiffError, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("line has {got} tokens, expected {expect}")]
    TokenCount { got: usize, expect: usize },
    #[error("parameter shape mismatch: expected {expect_rows}x{expect_cols}, got {got_rows}x{got_cols}")]
    ParamShape { expect_rows: usize, expect_cols: usize, got_rows: usize, got_cols: usize },
    #[error("parameter list ended early")]
    ParamsExhausted,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Each set attends within itself.
    SelfAttn,
    /// Points query lines and lines query points.
    CrossAttn,
}

/// Architecture hyperparameters. Every tensor shape in [`ModelParams`]
/// is a function of this struct alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Descriptor dimension D (network width).
    pub descriptor_dim: usize,
    /// Attention heads; must divide `descriptor_dim`.
    pub heads: usize,
    /// Tokens per line fed to the encoder.
    pub line_tokens: usize,
    /// Attention layer sequence.
    pub pattern: Vec<AttentionKind>,
    /// Hidden widths of the point head (input D, output 4 are implicit).
    pub point_head_hidden: Vec<usize>,
    /// Hidden widths of the line head (input D, output 7 are implicit).
    pub line_head_hidden: Vec<usize>,
    /// Reliability scale beta in r = 1/(1+|beta z|).
    pub beta: f64,
    /// Width multiplier of the line encoder's MLP sub-layer.
    pub encoder_expansion: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use AttentionKind::*;
        Self {
            descriptor_dim: 256,
            heads: 4,
            line_tokens: 12,
            pattern: vec![SelfAttn, CrossAttn, SelfAttn, CrossAttn, SelfAttn],
            point_head_hidden: vec![512, 1024, 512],
            line_head_hidden: vec![512, 1024, 512],
            beta: 100.0,
            encoder_expansion: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.descriptor_dim < 2 {
            return Err(ModelError::Config(format!("descriptor dim {} < 2", self.descriptor_dim)));
        }
        if self.heads == 0 || self.descriptor_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "descriptor dim {} not divisible by {} heads",
                self.descriptor_dim, self.heads
            )));
        }
        if self.line_tokens < 2 {
            return Err(ModelError::Config(format!("line tokens {} < 2", self.line_tokens)));
        }
        if self.pattern.is_empty() {
            return Err(ModelError::Config("empty layer pattern".into()));
        }
        if self.beta <= 0.0 {
            return Err(ModelError::Config(format!("beta {} <= 0", self.beta)));
        }
        if self.encoder_expansion == 0 {
            return Err(ModelError::Config("encoder expansion 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.descriptor_dim / self.heads
    }

    fn point_head_chain(&self) -> Vec<usize> {
        let mut c = vec![self.descriptor_dim];
        c.extend_from_slice(&self.point_head_hidden);
        c.push(4);
        c
    }

    fn line_head_chain(&self) -> Vec<usize> {
        let mut c = vec![self.descriptor_dim];
        c.extend_from_slice(&self.line_head_hidden);
        c.push(7);
        c
    }
}

// ---- parameter structure -------------------------------------------------
//
// One generic payload type covers parameter tensors (P = Tensor<T>) and
// their registered graph handles (P = Var). `build` walks the schema in a
// single canonical order; every other traversal is derived from it, so
// initialization, serialization, and gradient collection cannot drift.

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gain: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<P> {
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub output: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineEncoder<P> {
    pub attention: Attention<P>,
    pub norm1: Norm<P>,
    pub mlp: Vec<Linear<P>>,
    pub norm2: Norm<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayer<P> {
    pub attention: Attention<P>,
    pub update: Vec<Linear<P>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<P> {
    pub encoder: LineEncoder<P>,
    pub layers: Vec<GraphLayer<P>>,
    pub point_head: Vec<Linear<P>>,
    pub line_head: Vec<Linear<P>>,
}

pub type ModelParams<T> = Params<Tensor<T>>;
/// Graph handles for one forward pass, mirroring [`ModelParams`].
pub type ModelVars = Params<Var>;

/// What a parameter slot is, for initialization policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Weight,
    Bias,
    Gain,
}

impl<P> Params<P> {
    /// Constructs the full parameter structure for `config`, calling
    /// `make` once per tensor slot in canonical order with the slot kind
    /// and expected (rows, cols).
    pub fn build<E>(
        config: &ModelConfig,
        make: &mut impl FnMut(Slot, usize, usize) -> Result<P, E>,
    ) -> Result<Self, E> {
        let d = config.descriptor_dim;
        let attention = |make: &mut dyn FnMut(Slot, usize, usize) -> Result<P, E>| -> Result<Attention<P>, E> {
            Ok(Attention {
                query: Linear { weight: make(Slot::Weight, d, d)?, bias: make(Slot::Bias, 1, d)? },
                key: Linear { weight: make(Slot::Weight, d, d)?, bias: make(Slot::Bias, 1, d)? },
                value: Linear { weight: make(Slot::Weight, d, d)?, bias: make(Slot::Bias, 1, d)? },
                output: Linear { weight: make(Slot::Weight, d, d)?, bias: make(Slot::Bias, 1, d)? },
            })
        };
        let norm = |make: &mut dyn FnMut(Slot, usize, usize) -> Result<P, E>| -> Result<Norm<P>, E> {
            Ok(Norm { gain: make(Slot::Gain, 1, d)?, bias: make(Slot::Bias, 1, d)? })
        };
        let mlp_chain = |make: &mut dyn FnMut(Slot, usize, usize) -> Result<P, E>,
                         widths: &[usize]|
         -> Result<Vec<Linear<P>>, E> {
            let mut layers = Vec::with_capacity(widths.len() - 1);
            for w in widths.windows(2) {
                layers.push(Linear {
                    weight: make(Slot::Weight, w[0], w[1])?,
                    bias: make(Slot::Bias, 1, w[1])?,
                });
            }
            Ok(layers)
        };

        let encoder = LineEncoder {
            attention: attention(make)?,
            norm1: norm(make)?,
            mlp: mlp_chain(make, &[d, d * config.encoder_expansion, d])?,
            norm2: norm(make)?,
        };
        let mut layers = Vec::with_capacity(config.pattern.len());
        for _ in &config.pattern {
            layers.push(GraphLayer {
                attention: attention(make)?,
                // phi_m consumes [d || a] (2D wide), keeps width, then maps back to D
                update: mlp_chain(make, &[2 * d, 2 * d, d])?,
            });
        }
        let point_head = mlp_chain(make, &config.point_head_chain())?;
        let line_head = mlp_chain(make, &config.line_head_chain())?;
        Ok(Params { encoder, layers, point_head, line_head })
    }

    /// Visits every parameter in the same canonical order as [`Params::build`].
    pub fn for_each(&self, f: &mut impl FnMut(&P)) {
        let lin = |l: &Linear<P>, f: &mut dyn FnMut(&P)| {
            f(&l.weight);
            f(&l.bias);
        };
        let attn = |a: &Attention<P>, f: &mut dyn FnMut(&P)| {
            lin(&a.query, f);
            lin(&a.key, f);
            lin(&a.value, f);
            lin(&a.output, f);
        };
        let norm = |n: &Norm<P>, f: &mut dyn FnMut(&P)| {
            f(&n.gain);
            f(&n.bias);
        };
        attn(&self.encoder.attention, f);
        norm(&self.encoder.norm1, f);
        for l in &self.encoder.mlp {
            lin(l, f);
        }
        norm(&self.encoder.norm2, f);
        for layer in &self.layers {
            attn(&layer.attention, f);
            for l in &layer.update {
                lin(l, f);
            }
        }
        for l in &self.point_head {
            lin(l, f);
        }
        for l in &self.line_head {
            lin(l, f);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut P)) {
        let lin = |l: &mut Linear<P>, f: &mut dyn FnMut(&mut P)| {
            f(&mut l.weight);
            f(&mut l.bias);
        };
        let attn = |a: &mut Attention<P>, f: &mut dyn FnMut(&mut P)| {
            lin(&mut a.query, f);
            lin(&mut a.key, f);
            lin(&mut a.value, f);
            lin(&mut a.output, f);
        };
        let norm = |n: &mut Norm<P>, f: &mut dyn FnMut(&mut P)| {
            f(&mut n.gain);
            f(&mut n.bias);
        };
        attn(&mut self.encoder.attention, f);
        norm(&mut self.encoder.norm1, f);
        for l in &mut self.encoder.mlp {
            lin(l, f);
        }
        norm(&mut self.encoder.norm2, f);
        for layer in &mut self.layers {
            attn(&mut layer.attention, f);
            for l in &mut layer.update {
                lin(l, f);
            }
        }
        for l in &mut self.point_head {
            lin(l, f);
        }
        for l in &mut self.line_head {
            lin(l, f);
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Registers every parameter on a graph, returning the mirrored
    /// handle structure.
    pub fn register(&self, g: &mut Graph<T>) -> ModelVars {
        let mut vars = Vec::new();
        self.for_each(&mut |t| vars.push(g.input(t.clone())));
        let mut it = vars.into_iter();
        // rebuild the mirror by consuming handles in the same order
        let mirror = map_structure(self, &mut |_| it.next().expect("same traversal"));
        debug_assert!(it.next().is_none());
        mirror
    }

    /// Clones all tensors in canonical order.
    pub fn flatten(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.for_each(&mut |t| out.push(t.clone()));
        out
    }

    /// Rebuilds the structure from tensors in canonical order,
    /// shape-checking each against the config's schema.
    pub fn from_tensors(
        config: &ModelConfig,
        tensors: &mut impl Iterator<Item = Tensor<T>>,
    ) -> Result<Self, ModelError> {
        Params::build(config, &mut |_slot, rows, cols| {
            let t = tensors.next().ok_or(ModelError::ParamsExhausted)?;
            if t.shape() != (rows, cols) {
                return Err(ModelError::ParamShape {
                    expect_rows: rows,
                    expect_cols: cols,
                    got_rows: t.shape().0,
                    got_cols: t.shape().1,
                });
            }
            Ok(t)
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        map_structure(self, &mut |t| t.cast())
    }

    pub fn count_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |t| ok &= t.all_finite());
        ok
    }
}

impl ModelVars {
    /// Gradients for every parameter in canonical order (zeros where the
    /// loss does not touch a parameter).
    pub fn collect_grads<T: Scalar>(
        &self,
        g: &Graph<T>,
        grads: &crate::diffcore::Gradients<T>,
    ) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.for_each(&mut |&v| {
            let shape = g.value(v).shape();
            out.push(
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1)),
            );
        });
        out
    }
}

/// Rebuilds a `Params` structure with a per-slot transform; traversal
/// order matches `for_each`.
fn map_structure<A, B>(src: &Params<A>, f: &mut impl FnMut(&A) -> B) -> Params<B> {
    let lin = |l: &Linear<A>, f: &mut dyn FnMut(&A) -> B| Linear { weight: f(&l.weight), bias: f(&l.bias) };
    let attn = |a: &Attention<A>, f: &mut dyn FnMut(&A) -> B| Attention {
        query: lin(&a.query, f),
        key: lin(&a.key, f),
        value: lin(&a.value, f),
        output: lin(&a.output, f),
    };
    let norm = |n: &Norm<A>, f: &mut dyn FnMut(&A) -> B| Norm { gain: f(&n.gain), bias: f(&n.bias) };
    Params {
        encoder: LineEncoder {
            attention: attn(&src.encoder.attention, f),
            norm1: norm(&src.encoder.norm1, f),
            mlp: src.encoder.mlp.iter().map(|l| lin(l, f)).collect(),
            norm2: norm(&src.encoder.norm2, f),
        },
        layers: src
            .layers
            .iter()
            .map(|layer| GraphLayer {
                attention: attn(&layer.attention, f),
                update: layer.update.iter().map(|l| lin(l, f)).collect(),
            })
            .collect(),
        point_head: src.point_head.iter().map(|l| lin(l, f)).collect(),
        line_head: src.line_head.iter().map(|l| lin(l, f)).collect(),
    }
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains.
/// Deterministic for a given seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Params::build(config, &mut |slot, rows, cols| -> Result<Tensor<f32>, ModelError> {
        let t = match slot {
            Slot::Weight => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    data.push((rng.gen::<f64>() * 2.0 - 1.0) as f32 * limit as f32);
                }
                Tensor::new(rows, cols, data)?
            }
            Slot::Bias => Tensor::zeros(rows, cols),
            Slot::Gain => Tensor::filled(rows, cols, 1.0),
        };
        Ok(t)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            descriptor_dim: 16,
            heads: 4,
            line_tokens: 4,
            point_head_hidden: vec![8],
            line_head_hidden: vec![8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { heads: 3, ..small_config() };
        assert!(bad.validate().is_err(), "16 not divisible by 3");
        let bad = ModelConfig { line_tokens: 1, ..small_config() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { pattern: vec![], ..small_config() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn head_dim_divides() {
        let c = small_config();
        assert_eq!(c.head_dim(), 4);
    }

    #[test]
    fn init_is_deterministic() {
        let c = small_config();
        let a = init_params(&c, 99).unwrap();
        let b = init_params(&c, 99).unwrap();
        assert_eq!(a, b, "same seed must give bit-identical parameters");
        let c2 = init_params(&c, 100).unwrap();
        assert_ne!(a, c2, "different seeds should differ");
    }

    #[test]
    fn init_layout_round_trips_through_flatten() {
        let c = small_config();
        let p = init_params(&c, 1).unwrap();
        let flat = p.flatten();
        let rebuilt = ModelParams::from_tensors(&c, &mut flat.into_iter()).unwrap();
        assert_eq!(p, rebuilt);
    }

    #[test]
    fn from_tensors_rejects_wrong_shape() {
        let c = small_config();
        let mut flat = init_params(&c, 1).unwrap().flatten();
        flat[0] = Tensor::zeros(3, 3);
        let r = ModelParams::from_tensors(&c, &mut flat.into_iter());
        assert!(matches!(r, Err(ModelError::ParamShape { .. })));
    }

    #[test]
    fn biases_zero_gains_one_after_init() {
        let c = small_config();
        let p = init_params(&c, 7).unwrap();
        assert!(p.encoder.norm1.gain.data().iter().all(|&v| v == 1.0));
        assert!(p.encoder.norm1.bias.data().iter().all(|&v| v == 0.0));
        assert!(p.point_head[0].bias.data().iter().all(|&v| v == 0.0));
        assert!(p.all_finite());
    }
}
