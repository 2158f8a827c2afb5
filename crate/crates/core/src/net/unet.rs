//! Small U-Net velocity estimator `v(t, x_t, x_cond)`.
//!
//! ```text
//! in_conv ─ enc[0] ──────────────────────────── cat ─ dec[0] ─ GN ─ SiLU ─ out_conv
//!             └ down[0] ─ enc[1] ─────── cat ─ dec[1] ┘ up[0]
//!                           └ down[1] ─ mid ┘ up[1]
//! ```
//!
//! Residual blocks receive a sinusoidal time embedding, passed through a
//! two-layer MLP, as a per-channel bias after their first convolution.

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::flow::FlowSample;
use crate::net::ops::{
    add_channel_bias, channel_bias_backward, concat, silu, silu_backward, silu_vec, silu_vec_backward, split,
    timestep_embedding, upsample2, upsample2_backward, Conv2d, GroupNorm, GroupNormCache, Linear, Tensor,
};
use crate::net::params::{ParamBuilder, ParamStore};
use crate::net::{ArchSpec, Conditioning, VelocityModel};
use crate::raster::Raster;
use crate::rng::SimRng;
use crate::scalar::Real;

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache<T> {
    x: Tensor<T>,
    gn1: GroupNormCache<T>,
    h1: Tensor<T>,
    a1: Tensor<T>,
    gn2: GroupNormCache<T>,
    h2: Tensor<T>,
    a2: Tensor<T>,
}

impl ResBlock {
    fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, emb_dim: usize) -> Self {
        let gn1 = b.group_norm(&format!("{name}.norm1"), cin, ArchSpec::groups_for(cin));
        let conv1 = b.conv(&format!("{name}.conv1"), cin, cout, 3, 1);
        let emb = b.linear(&format!("{name}.emb"), emb_dim, cout);
        let gn2 = b.group_norm(&format!("{name}.norm2"), cout, ArchSpec::groups_for(cout));
        let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1);
        let skip = (cin != cout).then(|| b.conv(&format!("{name}.skip"), cin, cout, 1, 1));
        ResBlock {
            gn1,
            conv1,
            emb,
            gn2,
            conv2,
            skip,
        }
    }

    fn forward<T: Real>(&self, p: &[T], x: Tensor<T>, semb: &[T]) -> (Tensor<T>, ResCache<T>) {
        let (h1, gn1) = self.gn1.forward(p, &x);
        let a1 = silu(&h1);
        let mut c1 = self.conv1.forward(p, &a1);
        let bias = self.emb.forward(p, semb, x.n);
        add_channel_bias(&mut c1, &bias);
        let (h2, gn2) = self.gn2.forward(p, &c1);
        let a2 = silu(&h2);
        let mut out = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(p, &x)),
            None => out.add_assign(&x),
        }
        (
            out,
            ResCache {
                x,
                gn1,
                h1,
                a1,
                gn2,
                h2,
                a2,
            },
        )
    }

    /// Returns the input gradient and the gradient w.r.t. the shared embedding.
    fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        c: &ResCache<T>,
        semb: &[T],
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Vec<T>) {
        let mut dx = match &self.skip {
            Some(s) => s.backward(p, g, &c.x, dy),
            None => dy.clone(),
        };
        let da2 = self.conv2.backward(p, g, &c.a2, dy);
        let dh2 = silu_backward(&c.h2, &da2);
        let dc1 = self.gn2.backward(p, g, &c.gn2, &dh2);
        let dbias = channel_bias_backward(&dc1);
        let dsemb = self.emb.backward(p, g, semb, &dbias, c.x.n);
        let da1 = self.conv1.backward(p, g, &c.a1, &dc1);
        let dh1 = silu_backward(&c.h1, &da1);
        dx.add_assign(&self.gn1.backward(p, g, &c.gn1, &dh1));
        (dx, dsemb)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    temb1: Linear,
    temb2: Linear,
    in_conv: Conv2d,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<Conv2d>,
    dec: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

fn build_layers<T: Real>(arch: &ArchSpec, conditioning: Conditioning, rng: &mut SimRng) -> (Layers, ParamStore<T>) {
    let mut b = ParamBuilder::new(rng);
    let e = arch.time_embed_dim;
    let ch = |l: usize| arch.channels_at(l);
    let temb1 = b.linear("time.fc1", e, e);
    let temb2 = b.linear("time.fc2", e, e);
    let in_conv = b.conv("in_conv", conditioning.in_channels(), ch(0), 3, 1);
    let mut enc = Vec::new();
    let mut down = Vec::new();
    for l in 0..arch.depth {
        enc.push(ResBlock::build(&mut b, &format!("enc{l}"), ch(l), ch(l), e));
        down.push(b.conv(&format!("down{l}"), ch(l), ch(l + 1), 3, 2));
    }
    let mid = ResBlock::build(&mut b, "mid", ch(arch.depth), ch(arch.depth), e);
    let mut up = Vec::new();
    let mut dec = Vec::new();
    for l in 0..arch.depth {
        up.push(b.conv(&format!("up{l}"), ch(l + 1), ch(l), 3, 1));
        dec.push(ResBlock::build(&mut b, &format!("dec{l}"), 2 * ch(l), ch(l), e));
    }
    let out_norm = b.group_norm("out_norm", ch(0), ArchSpec::groups_for(ch(0)));
    let out_conv = b.conv("out_conv", ch(0), 1, 3, 1);
    (
        Layers {
            temb1,
            temb2,
            in_conv,
            enc,
            down,
            mid,
            up,
            dec,
            out_norm,
            out_conv,
        },
        b.store,
    )
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    n: usize,
    temb_in: Vec<T>,
    temb_h: Vec<T>,
    temb_a: Vec<T>,
    emb: Vec<T>,
    semb: Vec<T>,
    input: Tensor<T>,
    enc: Vec<ResCache<T>>,
    skips: Vec<Tensor<T>>,
    mid: Option<ResCache<T>>,
    ups: Vec<Tensor<T>>,
    dec: Vec<Option<ResCache<T>>>,
    out_norm: Option<GroupNormCache<T>>,
    out_h: Tensor<T>,
    out_a: Tensor<T>,
}

/// The trainable conditional velocity field: architecture, conditioning mode
/// and parameters.
#[derive(Clone, Debug)]
pub struct VelocityNet<T> {
    arch: ArchSpec,
    conditioning: Conditioning,
    params: ParamStore<T>,
    layers: Layers,
}

/// Largest number of samples pushed through one forward call when sampling.
pub const INFERENCE_CHUNK: usize = 16;

impl<T: Real> VelocityNet<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(arch: ArchSpec, conditioning: Conditioning, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SimRng::seed_from_u64(seed);
        let (layers, params) = build_layers(&arch, conditioning, &mut rng);
        Ok(VelocityNet {
            arch,
            conditioning,
            params,
            layers,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_inputs(&self, t: &[T], x_t: &[Raster<T>], cond: &[Raster<T>]) -> Result<(usize, usize)> {
        if x_t.is_empty() || x_t.len() != cond.len() || x_t.len() != t.len() {
            return Err(Error::validation(format!(
                "batch sizes differ: {} times, {} states, {} conditions",
                t.len(),
                x_t.len(),
                cond.len()
            )));
        }
        let shape = x_t[0].shape();
        for r in x_t.iter().chain(cond) {
            if r.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: r.shape(),
                });
            }
        }
        if let Some(bad) = t.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::validation(format!("time {bad} outside [0, 1]")));
        }
        let m = 1usize << self.arch.depth;
        if !shape.0.is_multiple_of(m) || !shape.1.is_multiple_of(m) || shape.0 == 0 || shape.1 == 0 {
            return Err(Error::validation(format!(
                "input {}x{} is not divisible by 2^depth = {m}",
                shape.0, shape.1
            )));
        }
        Ok(shape)
    }

    fn build_input(&self, x_t: &[Raster<T>], cond: &[Raster<T>], (h, w): (usize, usize)) -> Tensor<T> {
        let c = self.conditioning.in_channels();
        let mut input = Tensor::zeros(x_t.len(), c, h, w);
        let plane = h * w;
        for (i, (x, y)) in x_t.iter().zip(cond).enumerate() {
            let s = input.sample_mut(i);
            match self.conditioning {
                Conditioning::Concat => {
                    s[..plane].copy_from_slice(x.as_slice());
                    s[plane..].copy_from_slice(y.as_slice());
                }
                Conditioning::Add => {
                    for ((d, &a), &b) in s.iter_mut().zip(x.as_slice()).zip(y.as_slice()) {
                        *d = a + b;
                    }
                }
            }
        }
        input
    }

    fn forward_tensor(&self, t: &[T], input: Tensor<T>) -> (Tensor<T>, ForwardCache<T>) {
        let p = self.params.values();
        let ly = &self.layers;
        let n = input.n;
        let e = self.arch.time_embed_dim;
        let temb_in = timestep_embedding(t, e);
        let temb_h = ly.temb1.forward(p, &temb_in, n);
        let temb_a = silu_vec(&temb_h);
        let emb = ly.temb2.forward(p, &temb_a, n);
        let semb = silu_vec(&emb);

        let mut h = ly.in_conv.forward(p, &input);
        let mut enc = Vec::with_capacity(self.arch.depth);
        let mut skips = Vec::with_capacity(self.arch.depth);
        for l in 0..self.arch.depth {
            let (e_out, c) = ly.enc[l].forward(p, h, &semb);
            enc.push(c);
            h = ly.down[l].forward(p, &e_out);
            skips.push(e_out);
        }
        let (mut h, mid) = ly.mid.forward(p, h, &semb);
        let mut ups: Vec<Tensor<T>> = (0..self.arch.depth).map(|_| Tensor::zeros(0, 0, 0, 0)).collect();
        let mut dec: Vec<Option<ResCache<T>>> = (0..self.arch.depth).map(|_| None).collect();
        for l in (0..self.arch.depth).rev() {
            let upsampled = upsample2(&h);
            let u = ly.up[l].forward(p, &upsampled);
            let cat = concat(&u, &skips[l]);
            let (out, c) = ly.dec[l].forward(p, cat, &semb);
            ups[l] = upsampled;
            dec[l] = Some(c);
            h = out;
        }
        let (out_h, out_norm) = ly.out_norm.forward(p, &h);
        let out_a = silu(&out_h);
        let out = ly.out_conv.forward(p, &out_a);
        (
            out,
            ForwardCache {
                n,
                temb_in,
                temb_h,
                temb_a,
                emb,
                semb,
                input,
                enc,
                skips,
                mid: Some(mid),
                ups,
                dec,
                out_norm: Some(out_norm),
                out_h,
                out_a,
            },
        )
    }

    /// Accumulates parameter gradients for output gradient `dout` into `g`.
    fn backward_tensor(&self, cache: &ForwardCache<T>, dout: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let p = self.params.values();
        let ly = &self.layers;
        let n = cache.n;
        let mut dsemb = vec![T::zero(); cache.semb.len()];
        let acc = |d: Vec<T>, dsemb: &mut Vec<T>| {
            for (a, b) in dsemb.iter_mut().zip(d) {
                *a += b;
            }
        };

        let da = ly.out_conv.backward(p, g, &cache.out_a, dout);
        let dh = silu_backward(&cache.out_h, &da);
        let mut dh = ly
            .out_norm
            .backward(p, g, cache.out_norm.as_ref().expect("forward ran"), &dh);
        let mut dskips = Vec::with_capacity(self.arch.depth);
        for l in 0..self.arch.depth {
            let c = cache.dec[l].as_ref().expect("forward ran");
            let (dcat, ds) = ly.dec[l].backward(p, g, c, &cache.semb, &dh);
            acc(ds, &mut dsemb);
            let (du, dskip) = split(&dcat, self.arch.channels_at(l));
            dskips.push(dskip);
            let dup = ly.up[l].backward(p, g, &cache.ups[l], &du);
            dh = upsample2_backward(&dup);
        }
        let (mut dh, ds) = ly
            .mid
            .backward(p, g, cache.mid.as_ref().expect("forward ran"), &cache.semb, &dh);
        acc(ds, &mut dsemb);
        for l in (0..self.arch.depth).rev() {
            let mut de = ly.down[l].backward(p, g, &cache.skips[l], &dh);
            de.add_assign(&dskips[l]);
            let (dx, ds) = ly.enc[l].backward(p, g, &cache.enc[l], &cache.semb, &de);
            acc(ds, &mut dsemb);
            dh = dx;
        }
        let dinput = ly.in_conv.backward(p, g, &cache.input, &dh);

        let demb = silu_vec_backward(&cache.emb, &dsemb);
        let dta = ly.temb2.backward(p, g, &cache.temb_a, &demb, n);
        let dth = silu_vec_backward(&cache.temb_h, &dta);
        ly.temb1.backward(p, g, &cache.temb_in, &dth, n);
        dinput
    }

    /// Batched forward pass; element `i` uses `(t[i], x_t[i], cond[i])`.
    pub fn forward(&self, t: &[T], x_t: &[Raster<T>], cond: &[Raster<T>]) -> Result<Vec<Raster<T>>> {
        let shape = self.check_inputs(t, x_t, cond)?;
        let input = self.build_input(x_t, cond, shape);
        let (out, _) = self.forward_tensor(t, input);
        Ok(tensor_to_rasters(out))
    }

    /// Mean squared velocity error over the batch and its parameter gradient.
    pub fn loss_and_grad(&self, batch: &[FlowSample<T>]) -> Result<(T, Vec<T>)> {
        let t: Vec<T> = batch.iter().map(|s| s.t).collect();
        let x_t: Vec<Raster<T>> = batch.iter().map(|s| s.x_t.clone()).collect();
        let cond: Vec<Raster<T>> = batch.iter().map(|s| s.x_cond.clone()).collect();
        let shape = self.check_inputs(&t, &x_t, &cond)?;
        let input = self.build_input(&x_t, &cond, shape);
        let (out, cache) = self.forward_tensor(&t, input);
        let total = out.data.len();
        let scale = T::of(2.0 / total as f64);
        let mut sq = 0.0f64;
        let mut dout = out.same_shape();
        for (i, s) in batch.iter().enumerate() {
            let o = out.sample(i);
            let d = dout.sample_mut(i);
            for ((dv, &ov), &tv) in d.iter_mut().zip(o).zip(s.v_target.as_slice()) {
                let r = ov - tv;
                sq += r.f64() * r.f64();
                *dv = scale * r;
            }
        }
        let mut g = vec![T::zero(); self.params.len()];
        self.backward_tensor(&cache, &dout, &mut g);
        Ok((T::of(sq / total as f64), g))
    }

    /// Loss only, no gradient.
    pub fn loss(&self, batch: &[FlowSample<T>]) -> Result<T> {
        let t: Vec<T> = batch.iter().map(|s| s.t).collect();
        let x_t: Vec<Raster<T>> = batch.iter().map(|s| s.x_t.clone()).collect();
        let cond: Vec<Raster<T>> = batch.iter().map(|s| s.x_cond.clone()).collect();
        let out = self.forward(&t, &x_t, &cond)?;
        let mut sq = 0.0f64;
        let mut count = 0usize;
        for (o, s) in out.iter().zip(batch) {
            for (&a, &b) in o.as_slice().iter().zip(s.v_target.as_slice()) {
                sq += (a - b).f64().powi(2);
                count += 1;
            }
        }
        Ok(T::of(sq / count as f64))
    }
}

fn tensor_to_rasters<T: Real>(out: Tensor<T>) -> Vec<Raster<T>> {
    (0..out.n)
        .map(|i| Raster::from_vec(out.h, out.w, out.sample(i).to_vec()).expect("plane size"))
        .collect()
}

impl<T: Real> VelocityModel<T> for VelocityNet<T> {
    fn velocity_batch(&self, t: T, states: &[Raster<T>], cond: &Raster<T>) -> Result<Vec<Raster<T>>> {
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(INFERENCE_CHUNK) {
            let times = vec![t; chunk.len()];
            let conds = vec![cond.clone(); chunk.len()];
            out.extend(self.forward(&times, chunk, &conds)?);
        }
        Ok(out)
    }
}
