//! Graph construction for the network forward pass.

use super::{Attention, AttentionKind, GraphLayer, Linear, ModelConfig, ModelError, ModelVars};
use crate::diffcore::{Axis, Graph, Scalar, Tensor, Var};
use crate::geometry::Line3;
use nalgebra::Vector3;

/// Handles to the forward outputs still on the tape; `None` sides carry
/// no features in this image.
pub struct ForwardVars {
    /// Nx3 predicted world coordinates.
    pub point_coords: Option<Var>,
    /// Nx1 raw logits z.
    pub point_logits: Option<Var>,
    /// Nx1 reliabilities 1/(1+|beta z|).
    pub point_reliability: Option<Var>,
    /// Mx6 predicted endpoint pairs.
    pub line_coords: Option<Var>,
    pub line_logits: Option<Var>,
    pub line_reliability: Option<Var>,
}

/// Forward outputs detached from the tape, in plain f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub points: Vec<PointPrediction>,
    pub lines: Vec<LinePrediction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub coords: Vector3<f64>,
    pub logit: f64,
    pub reliability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePrediction {
    pub line: Line3,
    pub logit: f64,
    pub reliability: f64,
}

fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, l: &Linear<Var>) -> Result<Var, ModelError> {
    Ok(g.affine(x, l.weight, l.bias)?)
}

fn mlp<T: Scalar>(g: &mut Graph<T>, x: Var, layers: &[Linear<Var>]) -> Result<Var, ModelError> {
    let pairs: Vec<(Var, Var)> = layers.iter().map(|l| (l.weight, l.bias)).collect();
    Ok(g.mlp_forward(x, &pairs)?)
}

/// Multi-head scaled dot-product attention: `queries_from` attends over
/// `keys_from`, heads are column blocks, scores scaled by 1/sqrt(D/h).
pub(crate) fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    queries_from: Var,
    keys_from: Var,
    p: &Attention<Var>,
    heads: usize,
) -> Result<Var, ModelError> {
    let q = affine(g, queries_from, &p.query)?;
    let k = affine(g, keys_from, &p.key)?;
    let v = affine(g, keys_from, &p.value)?;
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale)?;
        let attn = g.softmax(scaled, Axis::Cols)?;
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(&head_outputs, Axis::Cols)?;
    affine(g, merged, &p.output)
}

/// One transformer block over a line's T tokens, mean-pooled to a single
/// 1xD descriptor. No positional encoding: tokens form a set.
pub fn encode_line<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    let (rows, cols) = g.value(tokens).shape();
    if rows != config.line_tokens {
        return Err(ModelError::TokenCount { got: rows, expect: config.line_tokens });
    }
    if cols != config.descriptor_dim {
        return Err(ModelError::Config(format!(
            "token width {} != descriptor dim {}",
            cols, config.descriptor_dim
        )));
    }
    let enc = &vars.encoder;
    let attended = multi_head_attention(g, tokens, tokens, &enc.attention, config.heads)?;
    let sum1 = g.add(tokens, attended)?;
    let x = g.layer_norm(sum1, enc.norm1.gain, enc.norm1.bias)?;
    let m = mlp(g, x, &enc.mlp)?;
    let sum2 = g.add(x, m)?;
    let x = g.layer_norm(sum2, enc.norm2.gain, enc.norm2.bias)?;
    Ok(g.mean_rows(x)?)
}

/// Residual attention update d <- d + phi([d || a]) applied to both sets.
/// Self layers attend within each set; cross layers swap sources. An
/// empty opposite set contributes a zero attention vector.
pub fn attention_layer<T: Scalar>(
    g: &mut Graph<T>,
    points: Option<Var>,
    lines: Option<Var>,
    kind: AttentionKind,
    layer: &GraphLayer<Var>,
    heads: usize,
) -> Result<(Option<Var>, Option<Var>), ModelError> {
    let width = |v: Var| g.value(v).cols();
    let attend = |g: &mut Graph<T>, target: Var, source: Option<Var>| -> Result<Var, ModelError> {
        match source {
            Some(src) => multi_head_attention(g, target, src, &layer.attention, heads),
            None => {
                let (rows, cols) = g.value(target).shape();
                Ok(g.zeros(rows, cols))
            }
        }
    };
    let update = |g: &mut Graph<T>, d: Var, a: Var| -> Result<Var, ModelError> {
        let joined = g.concat(&[d, a], Axis::Cols)?;
        let delta = mlp(g, joined, &layer.update)?;
        Ok(g.add(d, delta)?)
    };
    if let Some(p) = points {
        debug_assert_eq!(width(p) % heads, 0);
    }
    let new_points = match points {
        Some(p) => {
            let source = match kind {
                AttentionKind::SelfAttn => Some(p),
                AttentionKind::CrossAttn => lines,
            };
            let a = attend(g, p, source)?;
            Some(update(g, p, a)?)
        }
        None => None,
    };
    // lines attend over the *pre-update* point descriptors, matching the
    // simultaneous update in the residual equation
    let new_lines = match lines {
        Some(l) => {
            let source = match kind {
                AttentionKind::SelfAttn => Some(l),
                AttentionKind::CrossAttn => points,
            };
            let a = attend(g, l, source)?;
            Some(update(g, l, a)?)
        }
        None => None,
    };
    Ok((new_points, new_lines))
}

/// Reliability curve r = 1 / (1 + |beta z|) as a plain function. The
/// graph path below applies the same map column-wise to the logit head.
pub fn reliability(logit: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (beta * logit).abs())
}

fn reliability_from_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    beta: f64,
) -> Result<Var, ModelError> {
    let a = g.abs(logits)?;
    let s = g.scale(a, T::lit(beta))?;
    let one_plus = g.add_scalar(s, T::one())?;
    Ok(g.recip(one_plus)?)
}

/// Full forward pass: encode line tokens, run the attention pattern over
/// both descriptor sets, then regress per-feature geometry and logits.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    point_descriptors: Option<Var>,
    line_tokens: &[Var],
) -> Result<ForwardVars, ModelError> {
    if let Some(p) = point_descriptors {
        let (_, cols) = g.value(p).shape();
        if cols != config.descriptor_dim {
            return Err(ModelError::Config(format!(
                "point descriptor width {} != descriptor dim {}",
                cols, config.descriptor_dim
            )));
        }
    }
    let mut lines = if line_tokens.is_empty() {
        None
    } else {
        let encoded: Vec<Var> = line_tokens
            .iter()
            .map(|&t| encode_line(g, t, vars, config))
            .collect::<Result<_, _>>()?;
        Some(g.concat(&encoded, Axis::Rows)?)
    };
    let mut points = point_descriptors;
    for (kind, layer) in config.pattern.iter().zip(&vars.layers) {
        let (p2, l2) = attention_layer(g, points, lines, *kind, layer, config.heads)?;
        points = p2;
        lines = l2;
    }

    let mut out = ForwardVars {
        point_coords: None,
        point_logits: None,
        point_reliability: None,
        line_coords: None,
        line_logits: None,
        line_reliability: None,
    };
    if let Some(p) = points {
        let head = mlp(g, p, &vars.point_head)?;
        let coords = g.slice_cols(head, 0, 3)?;
        let logits = g.slice_cols(head, 3, 4)?;
        out.point_coords = Some(coords);
        out.point_reliability = Some(reliability_from_logits(g, logits, config.beta)?);
        out.point_logits = Some(logits);
    }
    if let Some(l) = lines {
        let head = mlp(g, l, &vars.line_head)?;
        let coords = g.slice_cols(head, 0, 6)?;
        let logits = g.slice_cols(head, 6, 7)?;
        out.line_coords = Some(coords);
        out.line_reliability = Some(reliability_from_logits(g, logits, config.beta)?);
        out.line_logits = Some(logits);
    }
    Ok(out)
}

impl ForwardVars {
    /// Detaches the forward values into plain f64 predictions.
    pub fn extract<T: Scalar>(&self, g: &Graph<T>) -> Prediction {
        let mut points = Vec::new();
        if let (Some(c), Some(z), Some(r)) = (self.point_coords, self.point_logits, self.point_reliability) {
            let cv = g.value(c);
            let zv = g.value(z);
            let rv = g.value(r);
            for i in 0..cv.rows() {
                points.push(PointPrediction {
                    coords: Vector3::new(
                        cv.get(i, 0).to_f64_lossy(),
                        cv.get(i, 1).to_f64_lossy(),
                        cv.get(i, 2).to_f64_lossy(),
                    ),
                    logit: zv.get(i, 0).to_f64_lossy(),
                    reliability: rv.get(i, 0).to_f64_lossy(),
                });
            }
        }
        let mut lines = Vec::new();
        if let (Some(c), Some(z), Some(r)) = (self.line_coords, self.line_logits, self.line_reliability) {
            let cv = g.value(c);
            let zv = g.value(z);
            let rv = g.value(r);
            for i in 0..cv.rows() {
                lines.push(LinePrediction {
                    line: Line3 {
                        p: Vector3::new(
                            cv.get(i, 0).to_f64_lossy(),
                            cv.get(i, 1).to_f64_lossy(),
                            cv.get(i, 2).to_f64_lossy(),
                        ),
                        q: Vector3::new(
                            cv.get(i, 3).to_f64_lossy(),
                            cv.get(i, 4).to_f64_lossy(),
                            cv.get(i, 5).to_f64_lossy(),
                        ),
                    },
                    logit: zv.get(i, 0).to_f64_lossy(),
                    reliability: rv.get(i, 0).to_f64_lossy(),
                });
            }
        }
        Prediction { points, lines }
    }
}

/// One-shot inference without keeping the tape around.
pub fn predict<T: Scalar>(
    params: &super::ModelParams<T>,
    config: &ModelConfig,
    point_descriptors: Option<&Tensor<T>>,
    line_tokens: &[Tensor<T>],
) -> Result<Prediction, ModelError> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let pd = point_descriptors.map(|t| g.input(t.clone()));
    let tok: Vec<Var> = line_tokens.iter().map(|t| g.input(t.clone())).collect();
    let fwd = forward(&mut g, &vars, config, pd, &tok)?;
    Ok(fwd.extract(&g))
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, ModelConfig, ModelParams};
    use super::*;
    use crate::diffcore::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f32> {
        Tensor::from_fn(rows, cols, |_, _| rng.gen::<f32>() * 2.0 - 1.0)
    }

    fn run_forward(
        params: &ModelParams<f32>,
        config: &ModelConfig,
        points: Option<&Tensor<f32>>,
        tokens: &[Tensor<f32>],
    ) -> Prediction {
        predict(params, config, points, tokens).unwrap()
    }

    #[test]
    fn single_point_self_attention_is_value_then_output_projection() {
        let config = small_config();
        let params = init_params(&config, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 1, 16);

        let mut g = Graph::<f32>::new();
        let vars = params.register(&mut g);
        let xv = g.input(x.clone());
        let attn = multi_head_attention(&mut g, xv, xv, &vars.encoder.attention, config.heads).unwrap();
        let attended = g.value(attn).clone();

        // with a single key the softmax weight is 1, so the result must be
        // output_proj(value_proj(x)) regardless of query/key params
        let mut g2 = Graph::<f32>::new();
        let vars2 = params.register(&mut g2);
        let xv2 = g2.input(x);
        let v = g2
            .affine(xv2, vars2.encoder.attention.value.weight, vars2.encoder.attention.value.bias)
            .unwrap();
        let o = g2
            .affine(v, vars2.encoder.attention.output.weight, vars2.encoder.attention.output.bias)
            .unwrap();
        let direct = g2.value(o).clone();
        for (a, b) in attended.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn encode_line_rejects_wrong_token_count() {
        let config = small_config();
        let params = init_params(&config, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bad = random_tensor(&mut rng, 3, 16); // T-1 tokens
        let r = predict(&params, &config, None, &[bad]);
        assert!(matches!(r, Err(ModelError::TokenCount { got: 3, expect: 4 })));
    }

    #[test]
    fn encode_line_is_permutation_invariant() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let params = init_params(&config, trial).unwrap();
            let tokens = random_tensor(&mut rng, 4, 16);
            let perm = [2usize, 0, 3, 1];
            let permuted = Tensor::from_fn(4, 16, |r, c| tokens.get(perm[r], c));
            let a = run_forward(&params, &config, None, &[tokens]);
            let b = run_forward(&params, &config, None, &[permuted]);
            let la = &a.lines[0];
            let lb = &b.lines[0];
            assert!(
                (la.line.p - lb.line.p).norm() < 1e-6
                    && (la.line.q - lb.line.q).norm() < 1e-6
                    && (la.logit - lb.logit).abs() < 1e-6,
                "token order changed the encoding"
            );
        }
    }

    #[test]
    fn forward_is_permutation_equivariant_over_points() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = init_params(&config, 4).unwrap();
        for _ in 0..20 {
            let n = 6;
            let points = random_tensor(&mut rng, n, 16);
            let tokens: Vec<Tensor<f32>> = (0..3).map(|_| random_tensor(&mut rng, 4, 16)).collect();
            let perm = [4usize, 1, 5, 0, 3, 2];
            let shuffled = Tensor::from_fn(n, 16, |r, c| points.get(perm[r], c));
            let a = run_forward(&params, &config, Some(&points), &tokens);
            let b = run_forward(&params, &config, Some(&shuffled), &tokens);
            for i in 0..n {
                let pa = &a.points[perm[i]];
                let pb = &b.points[i];
                assert!(
                    (pa.coords - pb.coords).norm() < 1e-6 && (pa.logit - pb.logit).abs() < 1e-6,
                    "row {} not equivariant", i
                );
            }
            // the line outputs must be untouched by point ordering
            for (la, lb) in a.lines.iter().zip(&b.lines) {
                assert!((la.line.p - lb.line.p).norm() < 1e-6);
                assert!((la.line.q - lb.line.q).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn reliability_follows_the_logit_map() {
        // beta=100: z=0 -> 1, z=0.01 -> 0.5, z=1 -> 1/101
        let config = small_config();
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::new(3, 1, vec![0.0, 0.01, 1.0]).unwrap());
        let r = reliability_from_logits(&mut g, z, config.beta).unwrap();
        let rv = g.value(r);
        assert!((rv.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((rv.get(1, 0) - 0.5).abs() < 1e-12);
        assert!((rv.get(2, 0) - 1.0 / 101.0).abs() < 1e-12);
        // graph path and plain function agree everywhere they are used
        for (i, z) in [0.0, 0.01, 1.0].into_iter().enumerate() {
            assert_eq!(rv.get(i, 0), reliability(z, config.beta));
        }
    }

    #[test]
    fn forward_without_lines_still_regresses_points() {
        let config = small_config();
        let params = init_params(&config, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points = random_tensor(&mut rng, 5, 16);
        let pred = run_forward(&params, &config, Some(&points), &[]);
        assert_eq!(pred.points.len(), 5);
        assert!(pred.lines.is_empty());
        for p in &pred.points {
            assert!(p.coords.iter().all(|v| v.is_finite()));
            assert!(p.reliability > 0.0 && p.reliability <= 1.0);
        }
    }

    #[test]
    fn fresh_params_produce_finite_outputs_and_valid_reliabilities() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for seed in 0..100 {
            let params = init_params(&config, seed).unwrap();
            let points = random_tensor(&mut rng, 4, 16);
            let tokens: Vec<Tensor<f32>> = (0..2).map(|_| random_tensor(&mut rng, 4, 16)).collect();
            let pred = run_forward(&params, &config, Some(&points), &tokens);
            for p in &pred.points {
                assert!(p.coords.iter().all(|v| v.is_finite()) && p.logit.is_finite());
                assert!(p.reliability > 0.0 && p.reliability <= 1.0);
                let expect = 1.0 / (1.0 + (config.beta * p.logit).abs());
                assert!((p.reliability - expect).abs() < 1e-6);
            }
            for l in &pred.lines {
                assert!(l.reliability > 0.0 && l.reliability <= 1.0);
            }
        }
    }

    #[test]
    fn attention_layer_gradients_match_finite_differences() {
        let config = small_config();
        let params = init_params(&config, 17).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let points = Tensor::<f64>::from_fn(6, 16, |_, _| rng.gen::<f64>() - 0.5);
        let lines = Tensor::<f64>::from_fn(3, 16, |_, _| rng.gen::<f64>() - 0.5);
        // check wrt the two descriptor sets (parameter gradients get their
        // full-model check in the losses module)
        let report = grad_check(
            |g, vars| {
                let model_vars = params.register(g);
                let (p2, l2) = attention_layer(
                    g,
                    Some(vars[0]),
                    Some(vars[1]),
                    AttentionKind::CrossAttn,
                    &model_vars.layers[1],
                    config.heads,
                )
                .unwrap();
                let sp = g.sum_all(p2.unwrap())?;
                let sl = g.sum_all(l2.unwrap())?;
                g.add(sp, sl)
            },
            &[points, lines],
            1e-6,
        )
        .unwrap();
        assert!(!report.kink_flagged, "reseed this test: relu kink near zero");
        assert!(report.max_rel_err <= 1e-4, "{:?}", report);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let config = small_config();
        let params = init_params(&config, 19).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let tokens = Tensor::<f64>::from_fn(4, 16, |_, _| rng.gen::<f64>() - 0.5);
        let report = grad_check(
            |g, vars| {
                let model_vars = params.register(g);
                let enc = encode_line(g, vars[0], &model_vars, &config).unwrap();
                g.sum_all(enc)
            },
            &[tokens],
            1e-6,
        )
        .unwrap();
        assert!(!report.kink_flagged, "reseed this test: relu kink near zero");
        assert!(report.max_rel_err <= 1e-4, "{:?}", report);
    }
}
