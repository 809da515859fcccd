//! The toy denoiser (velocity predictor).
//!
//! Latents live on a `g x g` grid (one row per cell). The network is a
//! two-level U-shape: a fine residual conv block, cross-attention site
//! `down`, 2x2 average pooling, a coarse conv block with site `mid` and an
//! MLP, nearest upsampling with a skip connection, site `up`, an MLP, a
//! final conv block, a per-cell MLP and a linear read-out of the predicted
//! velocity.

use std::sync::Arc;

use compass_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::BackboneConfig;
use crate::call_attention::{attend_graph, AttentionProbe, Grid, HookRegistry, SiteInfo};
use crate::nn::{init_linear, linear, sinusoidal, Binder};

const EPS: f64 = 1e-6;
pub const SITES: [&str; 3] = ["down", "mid", "up"];
pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

/// Per-call options: hooks, active adapter prefixes and an optional probe.
#[derive(Default)]
pub struct DenoiseContext<'a> {
    pub hooks: Option<&'a HookRegistry>,
    pub adapters: &'a [String],
    pub probe: Option<&'a mut AttentionProbe>,
}

#[derive(Debug)]
pub struct Denoiser {
    cfg: BackboneConfig,
    grid: usize,
    coarse: usize,
    pos: Arc<Tensor>,
    pool: Arc<Tensor>,
    upsample: Arc<Tensor>,
    conv_fine: Arc<Vec<Option<usize>>>,
    conv_coarse: Arc<Vec<Option<usize>>>,
}

fn conv_table(n: usize) -> Vec<Option<usize>> {
    let mut t = Vec::with_capacity(n * n * 9);
    for y in 0..n as isize {
        for x in 0..n as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (sx, sy) = (x + dx, y + dy);
                    let inside = sx >= 0 && sy >= 0 && sx < n as isize && sy < n as isize;
                    t.push(inside.then(|| (sy * n as isize + sx) as usize));
                }
            }
        }
    }
    t
}

fn position_encoding(n: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let mut t = Tensor::zeros(n * n, channels);
    for y in 0..n {
        for x in 0..n {
            let row = t.row_mut(y * n + x);
            row[..half].copy_from_slice(&sinusoidal(x as f64, half, 2.0 * n as f64));
            row[half..2 * half].copy_from_slice(&sinusoidal(y as f64, half, 2.0 * n as f64));
        }
    }
    t
}

impl Denoiser {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let grid = cfg.grid();
        let coarse = grid / 2;
        let mut pool = Tensor::zeros(coarse * coarse, grid * grid);
        let mut upsample = Tensor::zeros(grid * grid, coarse * coarse);
        for y in 0..grid {
            for x in 0..grid {
                let c = (y / 2) * coarse + x / 2;
                pool.set(c, y * grid + x, 0.25);
                upsample.set(y * grid + x, c, 1.0);
            }
        }
        Self {
            cfg: cfg.clone(),
            grid,
            coarse,
            pos: Arc::new(position_encoding(grid, cfg.channels)),
            pool: Arc::new(pool),
            upsample: Arc::new(upsample),
            conv_fine: Arc::new(conv_table(grid)),
            conv_coarse: Arc::new(conv_table(coarse)),
        }
    }

    pub fn site_grid(&self, site: &str) -> Grid {
        match site {
            "mid" => (self.coarse, self.coarse),
            _ => (self.grid, self.grid),
        }
    }

    pub fn sites(&self) -> Vec<SiteInfo> {
        SITES
            .iter()
            .map(|s| SiteInfo {
                name: s.to_string(),
                grid: self.site_grid(s),
            })
            .collect()
    }

    fn proj_dims(&self, which: &str) -> (usize, usize) {
        let c = &self.cfg;
        match which {
            "q" => (c.channels, c.attn_dim),
            "k" | "v" => (c.text_dim, c.attn_dim),
            _ => (c.attn_dim, c.channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.cfg.channels;
        let lat = self.cfg.latent_channels();
        init_linear(store, "unet.time1", self.cfg.time_dim, c, 1.0, rng);
        init_linear(store, "unet.time2", c, c, 1.0, rng);
        init_linear(store, "unet.in", lat, c, 1.0, rng);
        for conv in ["unet.conv_a", "unet.conv_a2", "unet.conv_mid", "unet.conv_b"] {
            init_linear(store, conv, 9 * c, c, 1.0, rng);
        }
        for site in SITES {
            for p in PROJECTIONS {
                let (i, o) = self.proj_dims(p);
                let std = 1.0 / (i as f64).sqrt();
                store.insert(format!("unet.attn.{site}.{p}"), Tensor::randn(i, o, std, rng));
            }
        }
        for mlp in ["unet.mlp_mid", "unet.mlp_up", "unet.mlp_out"] {
            init_linear(store, &format!("{mlp}.1"), c, 2 * c, 2f64.sqrt(), rng);
            init_linear(store, &format!("{mlp}.2"), 2 * c, c, 0.5, rng);
        }
        init_linear(store, "unet.out", c, lat, 0.5, rng);
    }

    /// Low-rank adapters on every attention projection; `B` starts at zero
    /// so a fresh adapter is an exact no-op.
    pub fn init_adapters<R: Rng + ?Sized>(&self, prefix: &str, rank: usize, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for site in SITES {
            for p in PROJECTIONS {
                let (i, o) = self.proj_dims(p);
                let std = 1.0 / (i as f64).sqrt();
                store.insert(format!("{prefix}.{site}.{p}.a"), Tensor::randn(i, rank, std, rng));
                store.insert(format!("{prefix}.{site}.{p}.b"), Tensor::zeros(rank, o));
            }
        }
        store
    }

    fn projection(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        site: &str,
        which: &str,
        adapters: &[String],
    ) -> Var {
        let w = b.get(g, &format!("unet.attn.{site}.{which}"));
        let mut y = g.matmul(x, w);
        for prefix in adapters {
            let a_name = format!("{prefix}.{site}.{which}.a");
            if !b.has(&a_name) {
                continue;
            }
            let a = b.get(g, &a_name);
            let bb = b.get(g, &format!("{prefix}.{site}.{which}.b"));
            let low = g.matmul(x, a);
            let delta = g.matmul(low, bb);
            y = g.add(y, delta);
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_attention(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        h: Var,
        cond: Var,
        site: &str,
        ctx: &mut DenoiseContext,
    ) -> Var {
        let n = g.rms_norm_rows(h, EPS);
        let q = self.projection(g, b, n, site, "q", ctx.adapters);
        let k = self.projection(g, b, cond, site, "k", ctx.adapters);
        let v = self.projection(g, b, cond, site, "v", ctx.adapters);
        let mask = ctx.hooks.and_then(|r| r.mask_for(site));
        let (out, weights) = attend_graph(g, q, k, v, mask);
        if let Some(p) = ctx.probe.as_deref_mut() {
            p.record(site, self.site_grid(site), g.value(weights));
        }
        let o = self.projection(g, b, out, site, "o", ctx.adapters);
        g.add(h, o)
    }

    fn conv_block(&self, g: &mut Graph, b: &mut Binder, h: Var, name: &str, coarse: bool) -> Var {
        let n = g.rms_norm_rows(h, EPS);
        let a = g.silu(n);
        let table = if coarse { &self.conv_coarse } else { &self.conv_fine };
        let cols = g.gather(a, table.clone(), 9);
        let y = linear(g, b, cols, name);
        g.add(h, y)
    }

    fn mlp_block(&self, g: &mut Graph, b: &mut Binder, h: Var, name: &str) -> Var {
        let n = g.rms_norm_rows(h, EPS);
        let m = linear(g, b, n, &format!("{name}.1"));
        let m = g.silu(m);
        let m = linear(g, b, m, &format!("{name}.2"));
        g.add(h, m)
    }

    /// Predicted velocity for latent `x` (`cells x latent_channels`) at timestep `t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        t: f64,
        cond: Var,
        ctx: &mut DenoiseContext,
    ) -> Var {
        let temb = g.constant(Tensor::row_vector(sinusoidal(t, self.cfg.time_dim, 10_000.0)));
        let temb = linear(g, b, temb, "unet.time1");
        let temb = g.silu(temb);
        let temb = linear(g, b, temb, "unet.time2");

        let h = linear(g, b, x, "unet.in");
        let h = g.add_const(h, &self.pos);
        let h = g.add_row(h, temb);
        let h = self.conv_block(g, b, h, "unet.conv_a", false);
        let h = self.conv_block(g, b, h, "unet.conv_a2", false);

        let pool = g.constant_arc(self.pool.clone());
        let d = g.matmul(pool, h);
        let d = g.add_row(d, temb);
        let d = self.conv_block(g, b, d, "unet.conv_mid", true);

        // All spatial mixing before this point; after the attention sites
        // only conv_b mixes neighbouring cells.
        let h = self.cross_attention(g, b, h, cond, "down", ctx);
        let d = self.cross_attention(g, b, d, cond, "mid", ctx);
        let d = self.mlp_block(g, b, d, "unet.mlp_mid");

        let up = g.constant_arc(self.upsample.clone());
        let u = g.matmul(up, d);
        let u = g.add(h, u);
        let u = self.cross_attention(g, b, u, cond, "up", ctx);
        let u = self.mlp_block(g, b, u, "unet.mlp_up");
        let u = self.conv_block(g, b, u, "unet.conv_b", false);
        let u = self.mlp_block(g, b, u, "unet.mlp_out");
        let n = g.rms_norm_rows(u, EPS);
        linear(g, b, n, "unet.out")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_table_handles_borders() {
        let t = conv_table(3);
        // top-left cell: only the centre, right, below and diagonal taps exist
        let first: Vec<Option<usize>> = t[..9].to_vec();
        assert_eq!(
            first,
            vec![None, None, None, None, Some(0), Some(1), None, Some(3), Some(4)]
        );
        assert_eq!(t.len(), 81);
    }
}
