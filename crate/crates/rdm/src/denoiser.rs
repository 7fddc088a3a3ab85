//! The learned noise predictor: maps (noised trajectory, diffusion step,
//! condition embedding) to a predicted noise tensor of the same shape.
//!
//! A residual stack of `depth` blocks, each: layer-norm-lite at entry, a
//! per-timestep linear, temporal mixing over the horizon axis (kernel-5
//! banded matmul), mish, plus a projected step/condition embedding. The
//! banded matrix is stored dense with off-band entries masked to zero, so
//! temporal mixing stays inside the tape's primitive set. Band dilation
//! grows 4x per block; the stack's receptive field must cover the horizon
//! or sampled plans lose global coherence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, Tape, Tensor, TensorId};
use crate::rng;

/// Taps on each side of the diagonal (kernel 5).
const BAND_TAPS: usize = 2;

/// Band dilation for block `l`.
fn block_dilation(l: usize) -> usize {
    4usize.pow(l as u32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Plan horizon H: timesteps per trajectory.
    pub horizon: usize,
    /// State dimension D.
    pub state_dim: usize,
    /// Hidden width W.
    pub width: usize,
    /// Number of residual blocks L.
    pub depth: usize,
    /// Embedding dimension E for both step and condition embeddings.
    pub embed_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 4 {
            return Err(Error::config(format!("horizon must be >= 4, got {}", self.horizon)));
        }
        if self.state_dim < 2 {
            return Err(Error::config(format!(
                "state_dim must be >= 2, got {}",
                self.state_dim
            )));
        }
        if self.width < self.embed_dim {
            return Err(Error::config(format!(
                "width ({}) must be >= embed_dim ({})",
                self.width, self.embed_dim
            )));
        }
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Total trainable scalar count implied by this config.
    pub fn param_count(&self) -> usize {
        let (h, d, w, l, e) = (
            self.horizon,
            self.state_dim,
            self.width,
            self.depth,
            self.embed_dim,
        );
        let input = d * w + w;
        let time = 2 * (e * e + e);
        let goal = d * e + e;
        let per_block = w /* ln gain */ + w * w + w /* linear */ + h * h /* band */
            + 2 * e * w + w /* embed projection */;
        let output = w * d + d;
        input + time + goal + l * per_block + output
    }
}

struct Block {
    ln_gain: Tensor,
    lin_w: Tensor,
    lin_b: Tensor,
    band: Tensor,
    emb_w: Tensor,
    emb_b: Tensor,
}

/// All trainable tensors, in a fixed order, plus the (non-trainable)
/// band mask derived from the horizon.
pub struct DenoiserParams {
    pub cfg: DenoiserConfig,
    in_w: Tensor,
    in_b: Tensor,
    time_w1: Tensor,
    time_b1: Tensor,
    time_w2: Tensor,
    time_b2: Tensor,
    goal_w: Tensor,
    goal_b: Tensor,
    blocks: Vec<Block>,
    out_w: Tensor,
    out_b: Tensor,
    band_masks: Vec<Tensor>,
}

fn band_mask(h: usize, dilation: usize) -> Tensor {
    let mut data = vec![0.0f32; h * h];
    for i in 0..h {
        for tap in -(BAND_TAPS as i64)..=(BAND_TAPS as i64) {
            let j = i as i64 + tap * dilation as i64;
            if (0..h as i64).contains(&j) {
                data[i * h + j as usize] = 1.0;
            }
        }
    }
    Tensor::from_vec(vec![h, h], data).expect("band mask shape")
}

/// Fan-in scaled uniform weights, zero biases, unit layer-norm gains.
/// Same seed, same params, bit for bit.
pub fn init_params(cfg: DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    cfg.validate()?;
    let (h, d, w, e) = (cfg.horizon, cfg.state_dim, cfg.width, cfg.embed_dim);
    let mut rng = rng::from_seed(seed);
    let masks: Vec<Tensor> = (0..cfg.depth).map(|l| band_mask(h, block_dilation(l))).collect();

    let in_w = Tensor::uniform_fan_in(vec![d, w], d, &mut rng);
    let in_b = Tensor::zeros(vec![w]);
    let time_w1 = Tensor::uniform_fan_in(vec![e, e], e, &mut rng);
    let time_b1 = Tensor::zeros(vec![e]);
    let time_w2 = Tensor::uniform_fan_in(vec![e, e], e, &mut rng);
    let time_b2 = Tensor::zeros(vec![e]);
    let goal_w = Tensor::uniform_fan_in(vec![d, e], d, &mut rng);
    let goal_b = Tensor::zeros(vec![e]);

    let mut blocks = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let raw = Tensor::uniform_fan_in(vec![h, h], 2 * BAND_TAPS + 1, &mut rng);
        let band = numkit::mul(&raw, &masks[l])?;
        blocks.push(Block {
            ln_gain: Tensor::from_vec(vec![w], vec![1.0; w])?,
            lin_w: Tensor::uniform_fan_in(vec![w, w], w, &mut rng),
            lin_b: Tensor::zeros(vec![w]),
            band,
            emb_w: Tensor::uniform_fan_in(vec![2 * e, w], 2 * e, &mut rng),
            emb_b: Tensor::zeros(vec![w]),
        });
    }

    let out_w = Tensor::uniform_fan_in(vec![w, d], w, &mut rng);
    let out_b = Tensor::zeros(vec![d]);

    Ok(DenoiserParams {
        cfg,
        in_w,
        in_b,
        time_w1,
        time_b1,
        time_w2,
        time_b2,
        goal_w,
        goal_b,
        blocks,
        out_w,
        out_b,
        band_masks: masks,
    })
}

impl DenoiserParams {
    /// Trainable tensors in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("in.w".into(), &self.in_w),
            ("in.b".into(), &self.in_b),
            ("time.w1".into(), &self.time_w1),
            ("time.b1".into(), &self.time_b1),
            ("time.w2".into(), &self.time_w2),
            ("time.b2".into(), &self.time_b2),
            ("goal.w".into(), &self.goal_w),
            ("goal.b".into(), &self.goal_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln_gain"), &b.ln_gain));
            out.push((format!("block{i}.lin_w"), &b.lin_w));
            out.push((format!("block{i}.lin_b"), &b.lin_b));
            out.push((format!("block{i}.band"), &b.band));
            out.push((format!("block{i}.emb_w"), &b.emb_w));
            out.push((format!("block{i}.emb_b"), &b.emb_b));
        }
        out.push(("out.w".into(), &self.out_w));
        out.push(("out.b".into(), &self.out_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("in.w".into(), &mut self.in_w),
            ("in.b".into(), &mut self.in_b),
            ("time.w1".into(), &mut self.time_w1),
            ("time.b1".into(), &mut self.time_b1),
            ("time.w2".into(), &mut self.time_w2),
            ("time.b2".into(), &mut self.time_b2),
            ("goal.w".into(), &mut self.goal_w),
            ("goal.b".into(), &mut self.goal_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln_gain"), &mut b.ln_gain));
            out.push((format!("block{i}.lin_w"), &mut b.lin_w));
            out.push((format!("block{i}.lin_b"), &mut b.lin_b));
            out.push((format!("block{i}.band"), &mut b.band));
            out.push((format!("block{i}.emb_w"), &mut b.emb_w));
            out.push((format!("block{i}.emb_b"), &mut b.emb_b));
        }
        out.push(("out.w".into(), &mut self.out_w));
        out.push(("out.b".into(), &mut self.out_b));
        out
    }

    /// Rebuild params from (name, tensor) pairs in checkpoint order.
    pub fn from_named(cfg: DenoiserConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let mut proto = init_params(cfg, 0)?;
        {
            let expected = proto.named_mut();
            if expected.len() != tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} tensors, found {}",
                    expected.len(),
                    tensors.len()
                )));
            }
            for ((name, slot), (got_name, got)) in expected.into_iter().zip(tensors) {
                if name != got_name {
                    return Err(Error::Checkpoint(format!(
                        "tensor order mismatch: expected `{name}`, found `{got_name}`"
                    )));
                }
                if slot.shape() != got.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        got.shape(),
                        slot.shape()
                    )));
                }
                if !got.all_finite() {
                    return Err(Error::Checkpoint(format!("tensor `{name}` is not finite")));
                }
                *slot = got;
            }
        }
        Ok(proto)
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Tape-side handles for one registration of the parameters.
pub struct DenoiserVars {
    pub ids: Vec<TensorId>,
    masks: Vec<TensorId>,
}

/// Register all parameters on a tape (leaves on a gradient tape, constants on
/// an inference tape). Returns handles in `named()` order.
pub fn register(tape: &mut Tape, params: &DenoiserParams) -> DenoiserVars {
    let ids = params
        .named()
        .into_iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect();
    let masks = params
        .band_masks
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    DenoiserVars { ids, masks }
}

struct BlockVars {
    ln_gain: TensorId,
    lin_w: TensorId,
    lin_b: TensorId,
    band: TensorId,
    emb_w: TensorId,
    emb_b: TensorId,
}

impl DenoiserVars {
    fn block(&self, i: usize) -> BlockVars {
        let base = 8 + i * 6;
        BlockVars {
            ln_gain: self.ids[base],
            lin_w: self.ids[base + 1],
            lin_b: self.ids[base + 2],
            band: self.ids[base + 3],
            emb_w: self.ids[base + 4],
            emb_b: self.ids[base + 5],
        }
    }
}

/// Sinusoidal step embedding followed by the learned two-layer mish projection.
pub fn timestep_embed(params: &DenoiserParams, step: usize) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let vars = register(&mut tape, params);
    let id = timestep_embed_on(&mut tape, &vars, params.cfg.embed_dim, step)?;
    Ok(tape.take_value(id))
}

fn timestep_embed_on(
    tape: &mut Tape,
    vars: &DenoiserVars,
    embed_dim: usize,
    step: usize,
) -> Result<TensorId> {
    let raw = tape.sinusoid(step, embed_dim)?;
    let h = tape.matmul(raw, vars.ids[2])?;
    let h = tape.add(h, vars.ids[3])?;
    let h = tape.mish(h)?;
    let h = tape.matmul(h, vars.ids[4])?;
    tape.add(h, vars.ids[5])
}

/// Tape-side goal projection, so the projection weights receive gradients
/// during training.
pub fn embed_goal_on(tape: &mut Tape, vars: &DenoiserVars, goal: TensorId) -> Result<TensorId> {
    let h = tape.matmul(goal, vars.ids[6])?;
    tape.add(h, vars.ids[7])
}

/// Learned projection of a goal state into condition-embedding space.
pub fn embed_goal(params: &DenoiserParams, goal: &[f32]) -> Result<Tensor> {
    if goal.len() != params.cfg.state_dim {
        return Err(Error::ShapeMismatch {
            op: "embed_goal",
            lhs: vec![goal.len()],
            rhs: vec![params.cfg.state_dim],
        });
    }
    let g = Tensor::from_vec(vec![goal.len()], goal.to_vec())?;
    let h = numkit::matmul(&g, &params.goal_w)?;
    numkit::add(&h, &params.goal_b)
}

/// Zero condition vector: unconditional mode.
pub fn zero_cond(cfg: &DenoiserConfig) -> Tensor {
    Tensor::zeros(vec![cfg.embed_dim])
}

/// Forward pass on an existing tape. `tau` must be [H, D] and `cond` [E].
pub fn forward(
    tape: &mut Tape,
    vars: &DenoiserVars,
    cfg: &DenoiserConfig,
    tau: TensorId,
    step: usize,
    cond: TensorId,
) -> Result<TensorId> {
    let tau_shape = tape.value(tau).shape().to_vec();
    if tau_shape != [cfg.horizon, cfg.state_dim] {
        return Err(Error::ShapeMismatch {
            op: "denoiser_forward",
            lhs: tau_shape,
            rhs: vec![cfg.horizon, cfg.state_dim],
        });
    }
    let cond_shape = tape.value(cond).shape().to_vec();
    if cond_shape != [cfg.embed_dim] {
        return Err(Error::ShapeMismatch {
            op: "denoiser_forward",
            lhs: cond_shape,
            rhs: vec![cfg.embed_dim],
        });
    }

    let step_emb = timestep_embed_on(tape, vars, cfg.embed_dim, step)?;
    let joint = tape.concat(step_emb, cond)?;

    let mut x = tape.matmul(tau, vars.ids[0])?;
    x = tape.add(x, vars.ids[1])?;

    for b in 0..cfg.depth {
        let bv = vars.block(b);
        let mut h = tape.layer_norm_lite(x, bv.ln_gain)?;
        h = tape.matmul(h, bv.lin_w)?;
        h = tape.add(h, bv.lin_b)?;
        let band = tape.mul(bv.band, vars.masks[b])?;
        h = tape.matmul(band, h)?;
        h = tape.mish(h)?;
        let mut emb = tape.matmul(joint, bv.emb_w)?;
        emb = tape.add(emb, bv.emb_b)?;
        h = tape.add(h, emb)?;
        x = tape.add(x, h)?;
    }

    let out = tape.matmul(x, vars.ids[vars.ids.len() - 2])?;
    tape.add(out, vars.ids[vars.ids.len() - 1])
}

/// Pure noise prediction: same inputs, same output, no recording.
pub fn predict_noise(
    params: &DenoiserParams,
    tau: &Tensor,
    step: usize,
    cond: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let vars = register(&mut tape, params);
    let tau_id = tape.constant(tau.clone());
    let cond_id = tape.constant(cond.clone());
    let out = forward(&mut tape, &vars, &params.cfg, tau_id, step, cond_id)?;
    Ok(tape.take_value(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            horizon: 8,
            state_dim: 4,
            width: 16,
            depth: 2,
            embed_dim: 8,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.embed_dim = 7;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.horizon = 3;
        assert!(c.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_params(tiny_cfg(), 42).unwrap();
        let b = init_params(tiny_cfg(), 42).unwrap();
        for ((_, ta), (_, tb)) in a.named().iter().zip(b.named().iter()) {
            assert_eq!(ta.as_slice(), tb.as_slice());
        }
        let c = init_params(tiny_cfg(), 43).unwrap();
        let differs = a
            .named()
            .iter()
            .zip(c.named().iter())
            .any(|((_, ta), (_, tc))| ta.as_slice() != tc.as_slice());
        assert!(differs);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = DenoiserConfig {
            horizon: 32,
            state_dim: 4,
            width: 128,
            depth: 4,
            embed_dim: 32,
        };
        let params = init_params(cfg, 0).unwrap();
        assert_eq!(params.scalar_count(), cfg.param_count());
        // by-hand sum of layer shapes for H=32, D=4, W=128, L=4, E=32
        let by_hand = (4 * 128 + 128)
            + 2 * (32 * 32 + 32)
            + (4 * 32 + 32)
            + 4 * (128 + 128 * 128 + 128 + 32 * 32 + 64 * 128 + 128)
            + (128 * 4 + 4);
        assert_eq!(cfg.param_count(), by_hand);
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = tiny_cfg();
        let params = init_params(cfg, 1).unwrap();
        let mut rng = crate::rng::from_seed(9);
        let tau = Tensor::std_normal(vec![cfg.horizon, cfg.state_dim], &mut rng);
        let cond = zero_cond(&cfg);
        let a = predict_noise(&params, &tau, 3, &cond).unwrap();
        let b = predict_noise(&params, &tau, 3, &cond).unwrap();
        assert_eq!(a.shape(), &[cfg.horizon, cfg.state_dim]);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn fresh_params_zero_input_bounded() {
        let cfg = DenoiserConfig {
            horizon: 32,
            state_dim: 4,
            width: 128,
            depth: 4,
            embed_dim: 32,
        };
        let params = init_params(cfg, 7).unwrap();
        let tau = Tensor::zeros(vec![cfg.horizon, cfg.state_dim]);
        let cond = zero_cond(&cfg);
        let out = predict_noise(&params, &tau, 10, &cond).unwrap();
        assert!(out.as_slice().iter().all(|v| v.abs() < 10.0));
    }

    #[test]
    fn timestep_embed_has_config_length() {
        let cfg = tiny_cfg();
        let params = init_params(cfg, 2).unwrap();
        let e = timestep_embed(&params, 5).unwrap();
        assert_eq!(e.shape(), &[cfg.embed_dim]);
        let e2 = timestep_embed(&params, 6).unwrap();
        assert_ne!(e.as_slice(), e2.as_slice());
    }

    #[test]
    fn band_mask_limits_temporal_reach() {
        // a unit impulse at row 0 influences rows within the dilated
        // receptive field only: sum over blocks of 2 taps * dilation
        let cfg = DenoiserConfig {
            horizon: 32,
            state_dim: 4,
            width: 16,
            depth: 2,
            embed_dim: 8,
        };
        let params = init_params(cfg, 3).unwrap();
        let cond = zero_cond(&cfg);
        let base = Tensor::zeros(vec![cfg.horizon, cfg.state_dim]);
        let y0 = predict_noise(&params, &base, 2, &cond).unwrap();

        let mut bumped = vec![0.0f32; cfg.horizon * cfg.state_dim];
        bumped[0] = 1.0; // impulse at timestep 0
        let tau = Tensor::from_vec(vec![cfg.horizon, cfg.state_dim], bumped).unwrap();
        let y1 = predict_noise(&params, &tau, 2, &cond).unwrap();

        let reach: usize = (0..cfg.depth).map(|l| BAND_TAPS * block_dilation(l)).sum();
        for t in 0..cfg.horizon {
            let changed = (0..cfg.state_dim).any(|j| {
                (y0.as_slice()[t * cfg.state_dim + j] - y1.as_slice()[t * cfg.state_dim + j])
                    .abs()
                    > 1e-7
            });
            if t > reach {
                assert!(!changed, "row {t} outside receptive field changed");
            }
            if t == 0 {
                assert!(changed, "impulse row must change");
            }
        }
    }

    #[test]
    fn dilated_stack_covers_default_horizons() {
        // receptive field must cover H for the configurations the fixtures
        // train, or plans lose global coherence
        for (h, depth) in [(32usize, 3usize), (64, 3), (32, 4)] {
            let reach: usize = (0..depth).map(|l| BAND_TAPS * block_dilation(l)).sum();
            assert!(
                2 * reach + 1 >= h,
                "depth {depth} receptive field {} too small for horizon {h}",
                2 * reach + 1
            );
        }
    }
}
