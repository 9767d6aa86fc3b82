//! Test-only oracles, independent of the production autodiff path.
//!
//! `RefNet` is a hand-written f64 conv+FC network with a closed-form
//! backward pass. Finite differences of its gradient give the
//! finite-difference-of-gradients HVP oracle; the production engine is
//! never consulted on this side of the comparison.

/// A small conv(valid, stride 1) + ReLU + FC + ReLU + linear-head network
/// in f64, with a scalar Huber regression loss against fixed targets.
pub struct RefNet {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub filters: usize,
    pub fc_width: usize,
    pub out_width: usize,
}

pub struct RefBatch {
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub targets: Vec<f64>,
    pub batch: usize,
}

impl RefNet {
    pub fn conv_out(&self) -> (usize, usize) {
        (self.h - self.k + 1, self.w - self.k + 1)
    }

    pub fn flat(&self) -> usize {
        let (ho, wo) = self.conv_out();
        ho * wo * self.filters
    }

    pub fn param_count(&self) -> usize {
        self.k * self.k * self.cin * self.filters
            + self.filters
            + self.flat() * self.fc_width
            + self.fc_width
            + self.fc_width * self.out_width
            + self.out_width
    }

    fn split<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &theta[off..off + n];
            off += n;
            s
        };
        let conv_w = take(self.k * self.k * self.cin * self.filters);
        let conv_b = take(self.filters);
        let fc_w = take(self.flat() * self.fc_width);
        let fc_b = take(self.fc_width);
        let head_w = take(self.fc_width * self.out_width);
        let head_b = take(self.out_width);
        (conv_w, conv_b, fc_w, fc_b, head_w, head_b)
    }

    /// Mean Huber loss over the batch.
    pub fn loss(&self, theta: &[f64], data: &RefBatch) -> f64 {
        let mut total = 0.0;
        for s in 0..data.batch {
            let (q, _, _, _) = self.forward_sample(theta, data, s);
            let d = q[data.actions[s]] - data.targets[s];
            total += if d * d <= 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        total / data.batch as f64
    }

    #[allow(clippy::type_complexity)]
    fn forward_sample(
        &self,
        theta: &[f64],
        data: &RefBatch,
        s: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (conv_w, conv_b, fc_w, fc_b, head_w, head_b) = self.split(theta);
        let (ho, wo) = self.conv_out();
        let obs = &data.obs[s * self.h * self.w * self.cin..(s + 1) * self.h * self.w * self.cin];
        // conv pre-activation
        let mut conv = vec![0.0f64; ho * wo * self.filters];
        for y in 0..ho {
            for x in 0..wo {
                for f in 0..self.filters {
                    let mut acc = conv_b[f];
                    for a in 0..self.k {
                        for b in 0..self.k {
                            for c in 0..self.cin {
                                acc += obs[((y + a) * self.w + (x + b)) * self.cin + c]
                                    * conv_w[((a * self.k + b) * self.cin + c) * self.filters + f];
                            }
                        }
                    }
                    conv[(y * wo + x) * self.filters + f] = acc;
                }
            }
        }
        let conv_relu: Vec<f64> = conv.iter().map(|&v| v.max(0.0)).collect();
        // fc pre-activation
        let mut fc = fc_b.to_vec();
        for (i, &v) in conv_relu.iter().enumerate() {
            if v != 0.0 {
                for (acc, &w) in fc.iter_mut().zip(&fc_w[i * self.fc_width..(i + 1) * self.fc_width]) {
                    *acc += v * w;
                }
            }
        }
        let fc_relu: Vec<f64> = fc.iter().map(|&v| v.max(0.0)).collect();
        let mut q = head_b.to_vec();
        for (i, &v) in fc_relu.iter().enumerate() {
            for (acc, &w) in q.iter_mut().zip(&head_w[i * self.out_width..(i + 1) * self.out_width]) {
                *acc += v * w;
            }
        }
        (q, conv, fc, conv_relu)
    }

    /// Closed-form gradient of the mean Huber loss, by hand-applied chain
    /// rule in f64.
    pub fn grad(&self, theta: &[f64], data: &RefBatch) -> Vec<f64> {
        let (_, _, fc_w, _, head_w, _) = self.split(theta);
        let (ho, wo) = self.conv_out();
        let mut g = vec![0.0f64; theta.len()];
        let n_conv_w = self.k * self.k * self.cin * self.filters;
        let n_fc_w = self.flat() * self.fc_width;
        let (g_off_cw, g_off_cb) = (0, n_conv_w);
        let g_off_fw = g_off_cb + self.filters;
        let g_off_fb = g_off_fw + n_fc_w;
        let g_off_hw = g_off_fb + self.fc_width;
        let g_off_hb = g_off_hw + self.fc_width * self.out_width;

        for s in 0..data.batch {
            let (q, conv_pre, fc_pre, conv_relu) = self.forward_sample(theta, data, s);
            let fc_relu: Vec<f64> = fc_pre.iter().map(|&v| v.max(0.0)).collect();
            let d = q[data.actions[s]] - data.targets[s];
            let dq = d.clamp(-1.0, 1.0) / data.batch as f64;
            // head
            let a = data.actions[s];
            g[g_off_hb + a] += dq;
            let mut d_fc_relu = vec![0.0f64; self.fc_width];
            for i in 0..self.fc_width {
                g[g_off_hw + i * self.out_width + a] += dq * fc_relu[i];
                d_fc_relu[i] = dq * head_w[i * self.out_width + a];
            }
            // fc
            let mut d_conv_relu = vec![0.0f64; self.flat()];
            for i in 0..self.fc_width {
                if fc_pre[i] > 0.0 {
                    let dpre = d_fc_relu[i];
                    g[g_off_fb + i] += dpre;
                    for j in 0..self.flat() {
                        g[g_off_fw + j * self.fc_width + i] += dpre * conv_relu[j];
                        d_conv_relu[j] += dpre * fc_w[j * self.fc_width + i];
                    }
                }
            }
            // conv
            let obs =
                &data.obs[s * self.h * self.w * self.cin..(s + 1) * self.h * self.w * self.cin];
            for y in 0..ho {
                for x in 0..wo {
                    for f in 0..self.filters {
                        let idx = (y * wo + x) * self.filters + f;
                        if conv_pre[idx] > 0.0 {
                            let dpre = d_conv_relu[idx];
                            if dpre == 0.0 {
                                continue;
                            }
                            g[g_off_cb + f] += dpre;
                            for a2 in 0..self.k {
                                for b in 0..self.k {
                                    for c in 0..self.cin {
                                        g[g_off_cw
                                            + ((a2 * self.k + b) * self.cin + c) * self.filters
                                            + f] += dpre
                                            * obs[((y + a2) * self.w + (x + b)) * self.cin + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let _ = g_off_cw;
        g
    }

    /// Central finite difference of the f64 gradient: the HVP oracle
    /// (g(θ+εv) − g(θ−εv)) / 2ε with ε = 1e-3/‖v‖.
    pub fn hvp_fd(&self, theta: &[f64], data: &RefBatch, v: &[f64]) -> Vec<f64> {
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let eps = 1e-3 / vnorm;
        let plus: Vec<f64> = theta.iter().zip(v).map(|(&t, &vi)| t + eps * vi).collect();
        let minus: Vec<f64> = theta.iter().zip(v).map(|(&t, &vi)| t - eps * vi).collect();
        let gp = self.grad(&plus, data);
        let gm = self.grad(&minus, data);
        gp.iter().zip(&gm).map(|(&a, &b)| (a - b) / (2.0 * eps)).collect()
    }
}
