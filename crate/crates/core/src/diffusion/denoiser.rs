//! Two-level U-Net with a cross-attention block at every resolution.
//!
//! ```text
//! context -> pooled query ─> + time embedding, fed to every Res block
//! [x_t | mask | masked_target] -> conv -> +pos -> Res -> Attn ─────────────┐ skip
//!                                                     └ conv/2 -> Res -> Attn -> up2 ┘
//!                                                        concat -> conv -> Res -> Attn -> conv -> F
//! ```
//!
//! The network output `F` is the noise estimate inside the mask. Outside it
//! the clean pixels are known, so the noise follows exactly:
//!
//! `eps_hat = (1 - m) * (x_t - sqrt(ab_t) * masked_target) / sqrt(1 - ab_t) + m * F`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::DiffusionSchedule;
use super::{InputVars, NoiseModel};
use crate::autograd::{Tape, Tensor, Var};
use crate::conditioning::EMBED_DIM;
use crate::nn::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Image channels `C`; the network input has `2C + 1`.
    pub image_channels: usize,
    /// Square working resolution; must be even.
    pub resolution: usize,
    pub base_width: usize,
    pub attention_dim: usize,
    /// Width the 768-dim context is projected to before attention.
    pub context_width: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { image_channels: 3, resolution: 32, base_width: 16, attention_dim: 16, context_width: 32 }
    }
}

impl DenoiserConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.image_channels + 1
    }
}

#[derive(Debug, Clone)]
struct ResIds {
    conv1_w: ParamId,
    conv1_b: ParamId,
    time_w: ParamId,
    time_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
}

#[derive(Debug, Clone)]
struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    time1_w: ParamId,
    time1_b: ParamId,
    time2_w: ParamId,
    time2_b: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    pool: AttnIds,
    in_w: ParamId,
    in_b: ParamId,
    pos: ParamId,
    res0: ResIds,
    attn0: AttnIds,
    down_w: ParamId,
    down_b: ParamId,
    res1: ResIds,
    attn1: AttnIds,
    up_w: ParamId,
    up_b: ParamId,
    res2: ResIds,
    attn2: AttnIds,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct UNetDenoiser {
    config: DenoiserConfig,
    alpha_bars: Vec<f64>,
    params: ParamStore,
    ids: Ids,
}

fn conv_param(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> (ParamId, ParamId) {
    let w = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
    let b = store.add_zeros(format!("{name}.bias"), &[cout]);
    (w, b)
}

fn linear_param(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> (ParamId, ParamId) {
    let w = store.add_uniform(format!("{name}.weight"), &[din, dout], din, rng);
    let b = store.add_zeros(format!("{name}.bias"), &[dout]);
    (w, b)
}

fn res_params(store: &mut ParamStore, name: &str, ch: usize, time_dim: usize, rng: &mut ChaCha8Rng) -> ResIds {
    let (conv1_w, conv1_b) = conv_param(store, &format!("{name}.conv1"), ch, ch, 3, rng);
    let (time_w, time_b) = linear_param(store, &format!("{name}.time"), time_dim, ch, rng);
    let (conv2_w, conv2_b) = conv_param(store, &format!("{name}.conv2"), ch, ch, 3, rng);
    // residual branch starts as the identity
    store.get_mut(conv2_w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    ResIds { conv1_w, conv1_b, time_w, time_b, conv2_w, conv2_b }
}

fn attn_params(store: &mut ParamStore, name: &str, ch: usize, ctx: usize, dim: usize, rng: &mut ChaCha8Rng) -> AttnIds {
    AttnIds {
        q: store.add_uniform(format!("{name}.q"), &[ch, dim], ch, rng),
        k: store.add_uniform(format!("{name}.k"), &[ctx, dim], ctx, rng),
        v: store.add_uniform(format!("{name}.v"), &[ctx, dim], ctx, rng),
        o: store.add_zeros(format!("{name}.o"), &[dim, ch]),
    }
}

impl UNetDenoiser {
    pub fn new(config: DenoiserConfig, schedule: &DiffusionSchedule, seed: u64) -> Self {
        assert!(config.resolution % 2 == 0 && config.resolution >= 2, "resolution must be even");
        assert!(config.base_width % 2 == 0, "base width must be even for the sinusoidal embedding");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (bw, a, cw, r) = (config.base_width, config.attention_dim, config.context_width, config.resolution);
        let (time1_w, time1_b) = linear_param(&mut s, "time.fc1", bw, bw, &mut rng);
        let (time2_w, time2_b) = linear_param(&mut s, "time.fc2", bw, bw, &mut rng);
        let (ctx_w, ctx_b) = linear_param(&mut s, "context", EMBED_DIM, cw, &mut rng);
        let pool = AttnIds {
            q: s.add_uniform("pool.query", &[1, a], 1, &mut rng),
            k: s.add_uniform("pool.k", &[cw, a], cw, &mut rng),
            v: s.add_uniform("pool.v", &[cw, a], cw, &mut rng),
            o: s.add_zeros("pool.o", &[a, bw]),
        };
        let (in_w, in_b) = conv_param(&mut s, "conv_in", config.input_channels(), bw, 3, &mut rng);
        let pos = s.add_uniform("pos_embed", &[bw, r, r], 4 * bw, &mut rng);
        let res0 = res_params(&mut s, "down0.res", bw, bw, &mut rng);
        let attn0 = attn_params(&mut s, "down0.attn", bw, cw, a, &mut rng);
        let (down_w, down_b) = conv_param(&mut s, "down0.downsample", bw, 2 * bw, 3, &mut rng);
        let res1 = res_params(&mut s, "mid.res", 2 * bw, bw, &mut rng);
        let attn1 = attn_params(&mut s, "mid.attn", 2 * bw, cw, a, &mut rng);
        let (up_w, up_b) = conv_param(&mut s, "up0.merge", 3 * bw, bw, 3, &mut rng);
        let res2 = res_params(&mut s, "up0.res", bw, bw, &mut rng);
        let attn2 = attn_params(&mut s, "up0.attn", bw, cw, a, &mut rng);
        let (out_w, out_b) = conv_param(&mut s, "conv_out", bw, config.image_channels, 3, &mut rng);
        let ids = Ids {
            time1_w,
            time1_b,
            time2_w,
            time2_b,
            ctx_w,
            ctx_b,
            pool,
            in_w,
            in_b,
            pos,
            res0,
            attn0,
            down_w,
            down_b,
            res1,
            attn1,
            up_w,
            up_b,
            res2,
            attn2,
            out_w,
            out_b,
        };
        Self { config, alpha_bars: schedule.alpha_bars().to_vec(), params: s, ids }
    }

    /// Rebuilds the network and overwrites its parameters by name.
    pub fn from_params(config: DenoiserConfig, schedule: &DiffusionSchedule, params: ParamStore) -> Result<Self, String> {
        let mut model = Self::new(config, schedule, 0);
        if model.params.len() != params.len() {
            return Err(format!("expected {} parameter tensors, found {}", model.params.len(), params.len()));
        }
        for (name, tensor) in params.iter() {
            let id = model.params.find(name).ok_or_else(|| format!("unexpected parameter {name}"))?;
            if model.params.get(id).shape() != tensor.shape() {
                return Err(format!("parameter {name}: shape {:?} vs {:?}", tensor.shape(), model.params.get(id).shape()));
            }
            *model.params.get_mut(id) = tensor.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn time_embedding(&self, t: usize) -> Tensor {
        let half = self.config.base_width / 2;
        let mut v = vec![0.0; 2 * half];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            v[i] = (t as f64 * freq).sin();
            v[half + i] = (t as f64 * freq).cos();
        }
        Tensor::new(vec![1, 2 * half], v)
    }

    fn conv(tape: &mut Tape, b: &Bound, x: Var, w: ParamId, bias: ParamId, stride: usize) -> Var {
        let y = tape.conv2d(x, b.var(w), stride, 1);
        tape.add_channel_bias(y, b.var(bias))
    }

    fn linear(tape: &mut Tape, b: &Bound, x: Var, w: ParamId, bias: ParamId) -> Var {
        let y = tape.matmul(x, b.var(w));
        tape.add_row_bias(y, b.var(bias))
    }

    fn res_block(tape: &mut Tape, b: &Bound, x: Var, temb: Var, ids: &ResIds) -> Var {
        let h = tape.silu(x);
        let h = Self::conv(tape, b, h, ids.conv1_w, ids.conv1_b, 1);
        let t = Self::linear(tape, b, temb, ids.time_w, ids.time_b);
        let ch = tape.shape(t)[1];
        let t = tape.reshape(t, &[ch]);
        let h = tape.add_channel_bias(h, t);
        let h = tape.silu(h);
        let h = Self::conv(tape, b, h, ids.conv2_w, ids.conv2_b, 1);
        tape.add(x, h)
    }

    /// One learned query attending over the context; the result joins the
    /// time embedding so every residual block sees it.
    fn pooled_context(&self, tape: &mut Tape, b: &Bound, ctx: Var) -> Var {
        let ids = &self.ids.pool;
        let k = tape.matmul(ctx, b.var(ids.k));
        let v = tape.matmul(ctx, b.var(ids.v));
        let kt = tape.transpose(k);
        let scores = tape.matmul(b.var(ids.q), kt);
        let scores = tape.scale(scores, 1.0 / (self.config.attention_dim as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v);
        tape.matmul(mixed, b.var(ids.o))
    }

    fn cross_attention(&self, tape: &mut Tape, b: &Bound, x: Var, ctx: Var, ids: &AttnIds) -> Var {
        let shape = tape.shape(x).to_vec();
        let (ch, hw) = (shape[0], shape[1] * shape[2]);
        let flat = tape.reshape(x, &[ch, hw]);
        let tokens = tape.transpose(flat);
        let normed = tape.layer_norm_rows(tokens, 1e-5);
        let q = tape.matmul(normed, b.var(ids.q));
        let k = tape.matmul(ctx, b.var(ids.k));
        let v = tape.matmul(ctx, b.var(ids.v));
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (self.config.attention_dim as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v);
        let out = tape.matmul(mixed, b.var(ids.o));
        let out = tape.transpose(out);
        let out = tape.reshape(out, &shape);
        tape.add(x, out)
    }
}

impl NoiseModel for UNetDenoiser {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn predict_on_tape(&self, tape: &mut Tape, b: &Bound, input: InputVars) -> Var {
        let ids = &self.ids;
        let r = self.config.resolution;
        let (_, h, w) = {
            let s = tape.shape(input.noisy);
            (s[0], s[1], s[2])
        };
        assert_eq!((h, w), (r, r), "denoiser runs at {r}x{r}");
        assert!((1..=self.alpha_bars.len()).contains(&input.t), "timestep {} out of range", input.t);

        let temb = tape.constant(self.time_embedding(input.t));
        let temb = Self::linear(tape, b, temb, ids.time1_w, ids.time1_b);
        let temb = tape.silu(temb);
        let temb = Self::linear(tape, b, temb, ids.time2_w, ids.time2_b);

        let ctx = tape.layer_norm_rows(input.context, 1e-5);
        let ctx = Self::linear(tape, b, ctx, ids.ctx_w, ids.ctx_b);
        let pooled = self.pooled_context(tape, b, ctx);
        let temb = tape.add(temb, pooled);
        let temb = tape.silu(temb);

        let x = tape.concat(&[input.noisy, input.mask, input.masked_target]);
        let x = Self::conv(tape, b, x, ids.in_w, ids.in_b, 1);
        let x = tape.add(x, b.var(ids.pos));
        let skip = Self::res_block(tape, b, x, temb, &ids.res0);
        let skip = self.cross_attention(tape, b, skip, ctx, &ids.attn0);

        let low = Self::conv(tape, b, skip, ids.down_w, ids.down_b, 2);
        let low = Self::res_block(tape, b, low, temb, &ids.res1);
        let low = self.cross_attention(tape, b, low, ctx, &ids.attn1);

        let up = tape.upsample2x(low);
        let up = tape.concat(&[up, skip]);
        let up = Self::conv(tape, b, up, ids.up_w, ids.up_b, 1);
        let up = Self::res_block(tape, b, up, temb, &ids.res2);
        let up = self.cross_attention(tape, b, up, ctx, &ids.attn2);
        let up = tape.silu(up);
        let fill = Self::conv(tape, b, up, ids.out_w, ids.out_b, 1);

        let c = self.config.image_channels;
        let mask = Tensor::new(vec![c, h, w], tape.value(input.mask).data().repeat(c));
        let keep = tape.constant(mask.map(|m| 1.0 - m));
        let mask = tape.constant(mask);
        let ab = self.alpha_bars[input.t - 1];
        let scaled = tape.scale(input.masked_target, ab.sqrt());
        let residual = tape.sub(input.noisy, scaled);
        let known = tape.scale(residual, 1.0 / (1.0 - ab).sqrt());
        let known = tape.mul(known, keep);
        let generated = tape.mul(fill, mask);
        tape.add(known, generated)
    }
}
