use std::ops::Range;

use super::*;

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads x n x n, row i holds attention of position i over j <= i
    probs: Vec<f64>,
    ctx: Vec<f64>,
    u: Vec<f64>,
    z1: Vec<f64>,
    adapter_z: Option<Vec<f64>>,
    output: Vec<f64>,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
}

impl Cache {
    pub(crate) fn layer_outputs(self) -> Vec<Vec<f64>> {
        self.layers.into_iter().map(|l| l.output).collect()
    }
}

pub(crate) struct Forward {
    /// rows.len() x vocab
    pub logits: Vec<f64>,
    pub cache: Option<Cache>,
}

/// Loss gradients, shaped like the model's weights.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub base: Option<Weights>,
    pub adapter: Option<Weights>,
}

/// `y = x W + b` for `n` rows.
fn linear(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * dout);
    for i in 0..n {
        y.extend_from_slice(b);
        let row = &mut y[i * dout..(i + 1) * dout];
        for (k, &xk) in x[i * din..(i + 1) * din].iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            for (yj, &wkj) in row.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *yj += xk * wkj;
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates into `dw`/`db` when given, returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    grads: Option<(&mut [f64], &mut [f64])>,
    want_dx: bool,
) -> Vec<f64> {
    if let Some((dw, db)) = grads {
        for i in 0..n {
            let dyi = &dy[i * dout..(i + 1) * dout];
            for (dbj, &g) in db.iter_mut().zip(dyi) {
                *dbj += g;
            }
            for (k, &xk) in x[i * din..(i + 1) * din].iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                for (dwkj, &g) in dw[k * dout..(k + 1) * dout].iter_mut().zip(dyi) {
                    *dwkj += xk * g;
                }
            }
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let dyi = &dy[i * dout..(i + 1) * dout];
        for (k, dxk) in dx[i * din..(i + 1) * din].iter_mut().enumerate() {
            *dxk = w[k * dout..(k + 1) * dout]
                .iter()
                .zip(dyi)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    dx
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

impl Model {
    pub(crate) fn run(&self, ids: &[u32], rows: Range<usize>, keep_cache: bool) -> Forward {
        let cfg = &self.config;
        let (n, d, v) = (ids.len(), cfg.hidden_dim, cfg.vocab_size);
        let (heads, hd) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let w = &self.base.tensors;

        let tok = &w[0];
        let pos = &w[1];
        let mut h = Vec::with_capacity(n * d);
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            h.extend(tok[id * d..(id + 1) * d].iter().zip(&pos[t * d..(t + 1) * d]).map(|(a, b)| a + b));
        }

        let mut caches = Vec::new();
        for l in 0..cfg.num_layers {
            let o = 2 + l * LAYER_SLOTS;
            let q = linear(&h, &w[o + WQ], &w[o + BQ], n, d, d);
            let k = linear(&h, &w[o + WK], &w[o + BK], n, d, d);
            let vv = linear(&h, &w[o + WV], &w[o + BV], n, d, d);

            let mut probs = vec![0.0; heads * n * n];
            let mut ctx = vec![0.0; n * d];
            for hh in 0..heads {
                let c0 = hh * hd;
                for i in 0..n {
                    let qi = &q[i * d + c0..i * d + c0 + hd];
                    let prow = &mut probs[(hh * n + i) * n..(hh * n + i) * n + n];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = qi.iter().zip(&k[j * d + c0..j * d + c0 + hd]).map(|(a, b)| a * b).sum::<f64>()
                            * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for p in prow[..=i].iter_mut() {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    for p in prow[..=i].iter_mut() {
                        *p /= sum;
                    }
                    let ci = &mut ctx[i * d + c0..i * d + c0 + hd];
                    for (j, &p) in prow[..=i].iter().enumerate() {
                        for (c, &vj) in ci.iter_mut().zip(&vv[j * d + c0..j * d + c0 + hd]) {
                            *c += p * vj;
                        }
                    }
                }
            }

            let mut u = linear(&ctx, &w[o + WO], &w[o + BO], n, d, d);
            add_into(&mut u, &h);

            let z1 = linear(&u, &w[o + W1], &w[o + B1], n, d, d);
            let mut out = linear(&relu(&z1), &w[o + W2], &w[o + B2], n, d, d);
            add_into(&mut out, &u);

            let adapter_z = self.adapter.as_ref().map(|a| {
                let ao = l * ADAPTER_SLOTS;
                let e = cfg.adapter_dim;
                let za = linear(&u, &a.tensors[ao + DOWN_W], &a.tensors[ao + DOWN_B], n, d, e);
                let branch = linear(&relu(&za), &a.tensors[ao + UP_W], &a.tensors[ao + UP_B], n, e, d);
                add_into(&mut out, &branch);
                za
            });

            if keep_cache {
                caches.push(LayerCache {
                    input: std::mem::take(&mut h),
                    q,
                    k,
                    v: vv,
                    probs,
                    ctx,
                    u,
                    z1,
                    adapter_z,
                    output: out.clone(),
                });
            }
            h = out;
        }

        let (r0, r1) = (rows.start, rows.end);
        let logits = linear(&h[r0 * d..r1 * d], &w[w.len() - 2], &w[w.len() - 1], r1 - r0, d, v);
        Forward {
            logits,
            cache: keep_cache.then_some(Cache { layers: caches }),
        }
    }

    /// Target-segment negative log-likelihood and its gradients.
    ///
    /// `want_base` / `want_adapter` select which parameter gradients are
    /// accumulated; backpropagation through the base runs either way.
    pub fn loss_and_gradients(
        &self,
        tokens: &TokenSequence,
        want_base: bool,
        want_adapter: bool,
    ) -> Result<(f64, Gradients)> {
        self.check_scored(tokens)?;
        let cfg = &self.config;
        let ids = tokens.ids();
        let (n, d, v) = (ids.len(), cfg.hidden_dim, cfg.vocab_size);
        let (heads, hd) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let rows = tokens.boundary() - 1..n - 1;
        let fwd = self.run(ids, rows.clone(), true);
        let cache = fwd.cache.expect("cache requested");
        let w = &self.base.tensors;

        let mut gb = want_base.then(|| self.base.zeros_like());
        let mut ga = match (&self.adapter, want_adapter) {
            (Some(a), true) => Some(a.zeros_like()),
            _ => None,
        };

        // Softmax cross-entropy on the scored rows.
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; rows.len() * v];
        for (r, p) in rows.clone().enumerate() {
            let row = &fwd.logits[r * v..(r + 1) * v];
            let target = ids[p + 1] as usize;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            loss -= row[target] - max - sum.ln();
            let drow = &mut dlogits[r * v..(r + 1) * v];
            for (dz, &z) in drow.iter_mut().zip(row) {
                *dz = (z - max).exp() / sum;
            }
            drow[target] -= 1.0;
        }

        // Head.
        let last = &cache.layers.last().expect("at least one layer").output;
        let nw = w.len();
        let mut dh = vec![0.0; n * d];
        {
            let x = &last[rows.start * d..rows.end * d];
            let grads = gb.as_mut().map(|g| {
                let (a, b) = g.tensors.split_at_mut(nw - 1);
                (a[nw - 2].as_mut_slice(), b[0].as_mut_slice())
            });
            let dx = linear_backward(x, &w[nw - 2], &dlogits, rows.len(), d, v, grads, true);
            dh[rows.start * d..rows.end * d].copy_from_slice(&dx);
        }

        for l in (0..cfg.num_layers).rev() {
            let c = &cache.layers[l];
            let o = 2 + l * LAYER_SLOTS;

            // h' = FFN(u) + u [+ Adapter(u)]
            let mut du = dh.clone();
            let r1 = relu(&c.z1);
            let mut dz1 = linear_backward(&r1, &w[o + W2], &dh, n, d, d, slot(&mut gb, o + W2), true);
            for (g, &z) in dz1.iter_mut().zip(&c.z1) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            let du_ffn = linear_backward(&c.u, &w[o + W1], &dz1, n, d, d, slot(&mut gb, o + W1), true);
            add_into(&mut du, &du_ffn);

            if let (Some(a), Some(za)) = (&self.adapter, &c.adapter_z) {
                let ao = l * ADAPTER_SLOTS;
                let e = cfg.adapter_dim;
                let ra = relu(za);
                let mut dza = linear_backward(&ra, &a.tensors[ao + UP_W], &dh, n, e, d, slot(&mut ga, ao + UP_W), true);
                for (g, &z) in dza.iter_mut().zip(za) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                let du_a =
                    linear_backward(&c.u, &a.tensors[ao + DOWN_W], &dza, n, d, e, slot(&mut ga, ao + DOWN_W), true);
                add_into(&mut du, &du_a);
            }

            // u = ctx Wo + bo + h
            let mut dh_prev = du.clone();
            let dctx = linear_backward(&c.ctx, &w[o + WO], &du, n, d, d, slot(&mut gb, o + WO), true);

            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for hh in 0..heads {
                let c0 = hh * hd;
                for i in 0..n {
                    let prow = &c.probs[(hh * n + i) * n..(hh * n + i) * n + n];
                    let dci = &dctx[i * d + c0..i * d + c0 + hd];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &c.v[j * d + c0..j * d + c0 + hd];
                        dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += prow[j] * dp[j];
                        for (g, &x) in dv[j * d + c0..j * d + c0 + hd].iter_mut().zip(dci) {
                            *g += prow[j] * x;
                        }
                    }
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..hd {
                            dq[i * d + c0 + t] += ds * c.k[j * d + c0 + t];
                            dk[j * d + c0 + t] += ds * c.q[i * d + c0 + t];
                        }
                    }
                }
            }
            for (wi, dy) in [(o + WQ, &dq), (o + WK, &dk), (o + WV, &dv)] {
                let dx = linear_backward(&c.input, &w[wi], dy, n, d, d, slot(&mut gb, wi), true);
                add_into(&mut dh_prev, &dx);
            }
            dh = dh_prev;
        }

        if let Some(g) = gb.as_mut() {
            let (tok, rest) = g.tensors.split_at_mut(1);
            for (t, &id) in ids.iter().enumerate() {
                let id = id as usize;
                add_into(&mut tok[0][id * d..(id + 1) * d], &dh[t * d..(t + 1) * d]);
                add_into(&mut rest[0][t * d..(t + 1) * d], &dh[t * d..(t + 1) * d]);
            }
        }

        Ok((loss, Gradients { base: gb, adapter: ga }))
    }
}

/// Mutable weight and bias gradient slices for the linear layer at `wi`.
fn slot(g: &mut Option<Weights>, wi: usize) -> Option<(&mut [f64], &mut [f64])> {
    g.as_mut().map(|g| {
        let (a, b) = g.tensors.split_at_mut(wi + 1);
        (a[wi].as_mut_slice(), b[0].as_mut_slice())
    })
}
