//! Dense feed-forward approximator with exact reverse-mode gradients, Adam,
//! and Polyak target updates. Critics use an identity output; actors map the
//! last layer through a scaled tanh onto their action box, so actor outputs
//! always lie inside the box.
//!
//! Parameters are `f64` end to end and every routine visits them in a fixed
//! order, so forward passes, gradients, and optimizer trajectories are
//! bit-identical across runs given the same construction seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite activation in forward pass")]
    NonFiniteActivation,
    #[error("architecture mismatch between networks")]
    ArchitectureMismatch,
    #[error("snapshot io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad snapshot header: {0}")]
    BadHeader(String),
}

/// Output nonlinearity of the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputMap {
    /// Raw linear output (critics).
    Identity,
    /// `low + (tanh(z) + 1) / 2 * (high - low)` per coordinate (actors).
    ActionBox { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Dense {
    /// Row-major `[out][in]`.
    w: Vec<f64>,
    b: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

/// Dense multi-layer perceptron with rectifier hidden layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Dense>,
    output: OutputMap,
    seed: u64,
}

/// Reusable buffers for [`Mlp::forward_batch_into`]. One scratch may be
/// shared by any number of networks; it grows to the largest batch seen.
///
/// The two ping-pong buffers carry different leading pads so their payloads
/// never sit a multiple of 4 KiB apart: equal-size allocations land at equal
/// page offsets, and the resulting false store-to-load conflicts between the
/// read and write buffers cost several times the arithmetic itself.
#[derive(Debug, Clone)]
pub struct BatchScratch {
    bufs: [Vec<f64>; 2],
    pads: [usize; 2],
    wt: Vec<f64>,
}

impl Default for BatchScratch {
    fn default() -> Self {
        Self { bufs: [Vec::new(), Vec::new()], pads: [0, 8], wt: Vec::new() }
    }
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct Grads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(net: &Mlp) -> Self {
        Self {
            w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.w {
            for v in w.iter_mut() {
                *v *= factor;
            }
        }
        for b in &mut self.b {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
    }
}

// C[m x n] = A[m x k] * B[k x n], all row-major; C is overwritten, which
// saves a zeroing pass over the batch buffers. Branch-free: with ReLU-sparse
// operands a zero-skip test mispredicts about half the time and costs more
// than the skipped work.
#[inline(never)]
fn gemm_set(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(k >= 1);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 1 {
        // Column output degenerates to per-row dots; split the reduction
        // chain across four accumulators so it pipelines.
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let mut acc = [0.0f64; 4];
            let mut l = 0;
            while l + 4 <= k {
                acc[0] += arow[l] * b[l];
                acc[1] += arow[l + 1] * b[l + 1];
                acc[2] += arow[l + 2] * b[l + 2];
                acc[3] += arow[l + 3] * b[l + 3];
                l += 4;
            }
            let mut tail = 0.0;
            while l < k {
                tail += arow[l] * b[l];
                l += 1;
            }
            c[i] = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let av0 = arow[0];
        for (cv, &bv) in crow.iter_mut().zip(&b[..n]) {
            *cv = av0 * bv;
        }
        for l in 1..k {
            let av = arow[l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// C[m x n] += A[m x k] * B[k x n], all row-major.
#[inline(never)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// C[m x n] += A[m x k] * B^T where B is [n x k] row-major (dot-product kernel).
#[inline(never)]
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            crow[j] += acc;
        }
    }
}

// C[m x n] += A^T * B where A is [k x m] and B is [k x n], row-major.
#[inline(never)]
fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Mlp {
    /// Build a network with the given layer sizes (input, hidden..., output)
    /// and fan-in uniform initialization `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new(sizes: &[usize], output: OutputMap, seed: u64) -> Result<Self, NetError> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(NetError::ShapeMismatch {
                what: "layer sizes",
                expected: 2,
                got: sizes.len(),
            });
        }
        if let OutputMap::ActionBox { low, high } = &output {
            let out = *sizes.last().unwrap();
            if low.len() != out || high.len() != out {
                return Err(NetError::ShapeMismatch {
                    what: "action box dims",
                    expected: out,
                    got: low.len(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let scale = 1.0 / (in_dim as f64).sqrt();
            let w = (0..in_dim * out_dim)
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            let b = (0..out_dim).map(|_| rng.random_range(-scale..scale)).collect();
            layers.push(Dense { w, b, in_dim, out_dim });
        }
        Ok(Self { sizes: sizes.to_vec(), layers, output, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output_map(&self) -> &OutputMap {
        &self.output
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn apply_output(&self, z: &mut [f64]) {
        if let OutputMap::ActionBox { low, high } = &self.output {
            for (i, v) in z.iter_mut().enumerate() {
                let center = 0.5 * (low[i] + high[i]);
                let half = 0.5 * (high[i] - low[i]);
                *v = center + half * v.tanh();
            }
        }
    }

    /// Forward pass for a single input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.forward_batch(input, 1)
    }

    /// Forward pass for `batch` inputs packed row-major. Returns a row-major
    /// `batch * output_dim` buffer.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>, NetError> {
        let mut scratch = BatchScratch::default();
        let mut out = Vec::new();
        self.forward_batch_into(inputs, batch, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Allocation-free batched forward: ping-pongs activations through the
    /// reusable `scratch` and writes the final row-major output into `out`.
    /// This is the hot path for the importance-sampled targets, which
    /// evaluate thousands of critic rows per training step. Rows are
    /// processed in cache-sized chunks so intermediate activations stay hot.
    pub fn forward_batch_into(
        &self,
        inputs: &[f64],
        batch: usize,
        scratch: &mut BatchScratch,
        out: &mut Vec<f64>,
    ) -> Result<(), NetError> {
        if inputs.len() != batch * self.input_dim() {
            return Err(NetError::ShapeMismatch {
                what: "input",
                expected: batch * self.input_dim(),
                got: inputs.len(),
            });
        }
        const CHUNK: usize = 512;
        let max_dim = self.sizes.iter().copied().max().unwrap();
        for (buf, pad) in scratch.bufs.iter_mut().zip(scratch.pads) {
            buf.resize(pad + CHUNK.min(batch) * max_dim, 0.0);
        }
        // Transposed weights per layer, packed end to end: the inner gemm
        // loop becomes an independent element-wise FMA, which vectorizes;
        // the dot-product form is a serial reduction chain and does not.
        let wt_total: usize = self.layers.iter().map(|l| l.w.len()).sum();
        scratch.wt.resize(wt_total, 0.0);
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut cursor = 0;
        for layer in &self.layers {
            offsets.push(cursor);
            for o in 0..layer.out_dim {
                for i in 0..layer.in_dim {
                    scratch.wt[cursor + i * layer.out_dim + o] = layer.w[o * layer.in_dim + i];
                }
            }
            cursor += layer.w.len();
        }

        let out_dim = self.output_dim();
        // Grow-only resize: every element is overwritten below, and skipping
        // the refill avoids a large clear on each call.
        if out.len() != batch * out_dim {
            out.resize(batch * out_dim, 0.0);
        }
        let last = self.layers.len() - 1;
        let mut start = 0;
        while start < batch {
            let rows = CHUNK.min(batch - start);
            // Invariant: the current layer's input lives in bufs[0] (or the
            // caller's slice on the first layer); intermediate outputs go to
            // bufs[1] and the buffers swap; the last layer writes its chunk
            // of `out` directly.
            for (idx, layer) in self.layers.iter().enumerate() {
                let wt = &scratch.wt[offsets[idx]..offsets[idx] + layer.w.len()];
                let (left, right) = scratch.bufs.split_at_mut(1);
                let src: &[f64] = if idx == 0 {
                    &inputs[start * layer.in_dim..(start + rows) * layer.in_dim]
                } else {
                    &left[0][scratch.pads[0]..scratch.pads[0] + rows * layer.in_dim]
                };
                let z: &mut [f64] = if idx == last {
                    &mut out[start * out_dim..(start + rows) * out_dim]
                } else {
                    &mut right[0][scratch.pads[1]..scratch.pads[1] + rows * layer.out_dim]
                };
                gemm_set(rows, layer.in_dim, layer.out_dim, src, wt, z);
                if idx != last {
                    for zrow in z.chunks_exact_mut(layer.out_dim) {
                        for (v, &bv) in zrow.iter_mut().zip(&layer.b) {
                            *v = (*v + bv).max(0.0);
                        }
                    }
                } else {
                    for zrow in z.chunks_exact_mut(layer.out_dim) {
                        for (v, &bv) in zrow.iter_mut().zip(&layer.b) {
                            *v += bv;
                        }
                        self.apply_output(zrow);
                    }
                }
                scratch.bufs.swap(0, 1);
                scratch.pads.swap(0, 1);
            }
            start += rows;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteActivation);
        }
        Ok(())
    }

    /// Forward pass caching per-layer activations for backprop. The cache
    /// layout is `[inputs, h_1, ..., h_{L-1}, z_L]` (pre-output-map last).
    fn forward_cached(&self, inputs: &[f64], batch: usize) -> Result<Vec<Vec<f64>>, NetError> {
        if inputs.len() != batch * self.input_dim() {
            return Err(NetError::ShapeMismatch {
                what: "input",
                expected: batch * self.input_dim(),
                got: inputs.len(),
            });
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_vec());
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; batch * layer.out_dim];
            gemm_abt(batch, layer.in_dim, layer.out_dim, acts.last().unwrap(), &layer.w, &mut z);
            for row in 0..batch {
                let zrow = &mut z[row * layer.out_dim..(row + 1) * layer.out_dim];
                for (o, v) in zrow.iter_mut().enumerate() {
                    *v += layer.b[o];
                    if idx != last {
                        *v = v.max(0.0);
                    }
                }
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Reverse-mode gradients of `sum_rows output . upstream` with respect to
    /// all parameters and all inputs.
    ///
    /// `upstream` is row-major `batch * output_dim`. Returns the parameter
    /// gradients (summed over rows) and the per-row input gradients.
    pub fn backprop_batch(
        &self,
        inputs: &[f64],
        batch: usize,
        upstream: &[f64],
    ) -> Result<(Grads, Vec<f64>), NetError> {
        if upstream.len() != batch * self.output_dim() {
            return Err(NetError::ShapeMismatch {
                what: "upstream",
                expected: batch * self.output_dim(),
                got: upstream.len(),
            });
        }
        let acts = self.forward_cached(inputs, batch)?;
        let mut grads = Grads::zeros(self);

        // Output map jacobian onto the last pre-activation.
        let out_dim = self.output_dim();
        let mut dz: Vec<f64> = upstream.to_vec();
        if let OutputMap::ActionBox { low, high } = &self.output {
            let z_last = acts.last().unwrap();
            for row in 0..batch {
                for o in 0..out_dim {
                    let half = 0.5 * (high[o] - low[o]);
                    let t = z_last[row * out_dim + o].tanh();
                    dz[row * out_dim + o] *= half * (1.0 - t * t);
                }
            }
        }

        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            // Hidden layers cached post-ReLU: mask dz where the unit was off.
            if idx != self.layers.len() - 1 {
                let h = &acts[idx + 1];
                for (v, &hv) in dz.iter_mut().zip(h.iter()) {
                    if hv <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let x = &acts[idx];
            // dW += dz^T x ; db += column sums of dz.
            gemm_atb(layer.out_dim, batch, layer.in_dim, &dz, x, &mut grads.w[idx]);
            for row in 0..batch {
                for o in 0..layer.out_dim {
                    grads.b[idx][o] += dz[row * layer.out_dim + o];
                }
            }
            // dx = dz W.
            let mut dx = vec![0.0; batch * layer.in_dim];
            gemm(batch, layer.out_dim, layer.in_dim, &dz, &layer.w, &mut dx);
            dz = dx;
        }
        Ok((grads, dz))
    }

    /// Gradients of `output . upstream` w.r.t. all parameters (single input).
    pub fn grad_params(&self, input: &[f64], upstream: &[f64]) -> Result<Grads, NetError> {
        let (grads, _) = self.backprop_batch(input, 1, upstream)?;
        Ok(grads)
    }

    /// Gradient of `output . upstream` w.r.t. the input slot (single input).
    pub fn grad_input(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>, NetError> {
        let (_, dx) = self.backprop_batch(input, 1, upstream)?;
        Ok(dx)
    }

    /// Polyak update: `target <- tau * online + (1 - tau) * target`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<(), NetError> {
        if self.sizes != online.sizes || self.output != online.output {
            return Err(NetError::ArchitectureMismatch);
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (tv, &ov) in t.w.iter_mut().zip(&o.w) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
            for (tv, &ov) in t.b.iter_mut().zip(&o.b) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
        }
        Ok(())
    }

    fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut idx = 0;
        for layer in &mut self.layers {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                f(idx, v);
                idx += 1;
            }
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out
    }

    /// Overwrite all parameters from a flat array in [`Mlp::flat_params`]
    /// order.
    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.num_params() {
            return Err(NetError::ShapeMismatch {
                what: "flat params",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        self.for_each_param_mut(|idx, v| *v = params[idx]);
        Ok(())
    }

    /// Snapshot: one-line JSON header (sizes, output map, seed) followed by
    /// the flat little-endian f64 parameter array in layer order (w then b).
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SnapshotHeader {
            sizes: self.sizes.clone(),
            output: self.output.clone(),
            seed: self.seed,
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        for p in self.flat_params() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| NetError::BadHeader("missing newline after header".into()))?;
        let header: SnapshotHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| NetError::BadHeader(e.to_string()))?;
        let mut net = Mlp::new(&header.sizes, header.output, header.seed)?;
        let body = &bytes[newline + 1..];
        let expected = net.num_params() * 8;
        if body.len() != expected {
            return Err(NetError::BadHeader(format!(
                "parameter payload has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        net.for_each_param_mut(|idx, v| *v = params[idx]);
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NetError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    #[cfg(test)]
    fn layer_mut(&mut self, idx: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
        let layer = &mut self.layers[idx];
        (&mut layer.w, &mut layer.b)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    sizes: Vec<usize>,
    output: OutputMap,
    seed: u64,
}

/// Adam optimizer state over a network's flattened parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.num_params();
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam step along `-grads`.
    pub fn apply(&mut self, net: &mut Mlp, grads: &Grads) -> Result<(), NetError> {
        if grads.w.len() != net.layers.len() {
            return Err(NetError::ArchitectureMismatch);
        }
        let mut flat = Vec::with_capacity(self.m.len());
        for (layer, (gw, gb)) in net.layers.iter().zip(grads.w.iter().zip(&grads.b)) {
            if gw.len() != layer.w.len() || gb.len() != layer.b.len() {
                return Err(NetError::ArchitectureMismatch);
            }
            flat.extend_from_slice(gw);
            flat.extend_from_slice(gb);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        net.for_each_param_mut(|idx, p| {
            let g = flat[idx];
            m[idx] = b1 * m[idx] + (1.0 - b1) * g;
            v[idx] = b2 * v[idx] + (1.0 - b2) * g * g;
            let m_hat = m[idx] / bc1;
            let v_hat = v[idx] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed_net(sizes: &[usize]) -> Mlp {
        // Deterministic small net for closed-form checks.
        let mut net = Mlp::new(sizes, OutputMap::Identity, 0).unwrap();
        net.for_each_param_mut(|_, v| *v = 0.0);
        net
    }

    #[test]
    fn zero_net_outputs_output_bias() {
        let mut net = zeroed_net(&[3, 2]);
        *net.layer_mut(0).1 = vec![0.25, -0.5];
        let out = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.25, -0.5]);
    }

    #[test]
    fn identity_single_weight_net() {
        let mut net = zeroed_net(&[1, 1]);
        *net.layer_mut(0).0 = vec![1.0];
        let out = net.forward(&[2.0]).unwrap();
        assert_eq!(out, vec![2.0]);
    }

    #[test]
    fn forward_is_reproducible_across_constructions() {
        let a = Mlp::new(&[4, 8, 2], OutputMap::Identity, 99).unwrap();
        let b = Mlp::new(&[4, 8, 2], OutputMap::Identity, 99).unwrap();
        let x = [0.3, -0.7, 1.2, 0.0];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        let c = Mlp::new(&[4, 8, 2], OutputMap::Identity, 100).unwrap();
        assert_ne!(a.forward(&x).unwrap(), c.forward(&x).unwrap());
    }

    #[test]
    fn forward_batch_matches_single_rows() {
        let net = Mlp::new(&[3, 16, 16, 2], OutputMap::Identity, 7).unwrap();
        let rows = [[0.1, -0.2, 0.3], [1.0, 0.0, -1.0], [0.5, 0.5, 0.5]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let batched = net.forward_batch(&flat, 3).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = net.forward(row).unwrap();
            assert_eq!(&batched[i * 2..(i + 1) * 2], single.as_slice());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = Mlp::new(&[3, 4, 1], OutputMap::Identity, 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(NetError::ShapeMismatch { .. })));
    }

    #[test]
    fn linear_net_gradients_are_closed_form() {
        let net = zeroed_net(&[2, 1]);
        let grads = net.grad_params(&[3.0, -4.0], &[2.0]).unwrap();
        // d(out * up)/dw = up * x
        assert_eq!(grads.w[0], vec![6.0, -8.0]);
        assert_eq!(grads.b[0], vec![2.0]);
        let gin = net.grad_input(&[3.0, -4.0], &[2.0]).unwrap();
        // Weights are zero, so the input gradient vanishes.
        assert_eq!(gin, vec![0.0, 0.0]);
    }

    #[test]
    fn input_gradient_of_weighted_linear_net() {
        let mut net = zeroed_net(&[2, 1]);
        *net.layer_mut(0).0 = vec![1.5, -0.5];
        let gin = net.grad_input(&[0.0, 0.0], &[2.0]).unwrap();
        assert_eq!(gin, vec![3.0, -1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::new(&[3, 8, 2], OutputMap::Identity, 5).unwrap();
        let grads = net.grad_params(&[0.2, 0.4, -0.1], &[0.0, 0.0]).unwrap();
        assert!(grads.w.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.b.iter().flatten().all(|&g| g == 0.0));
    }

    fn finite_difference_check(net: &mut Mlp, input: &[f64], upstream: &[f64]) -> f64 {
        let analytic = net.grad_params(input, upstream).unwrap();
        let d_input = net.grad_input(input, upstream).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let objective = |net: &Mlp, x: &[f64]| -> f64 {
            net.forward(x).unwrap().iter().zip(upstream).map(|(o, u)| o * u).sum()
        };
        let n_layers = net.layers.len();
        for l in 0..n_layers {
            for p in 0..net.layers[l].w.len() {
                let orig = net.layers[l].w[p];
                net.layers[l].w[p] = orig + h;
                let plus = objective(net, input);
                net.layers[l].w[p] = orig - h;
                let minus = objective(net, input);
                net.layers[l].w[p] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.w[l][p];
                let scale = a.abs().max(numeric.abs()).max(1.0);
                max_rel = max_rel.max((a - numeric).abs() / scale);
            }
            for p in 0..net.layers[l].b.len() {
                let orig = net.layers[l].b[p];
                net.layers[l].b[p] = orig + h;
                let plus = objective(net, input);
                net.layers[l].b[p] = orig - h;
                let minus = objective(net, input);
                net.layers[l].b[p] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.b[l][p];
                let scale = a.abs().max(numeric.abs()).max(1.0);
                max_rel = max_rel.max((a - numeric).abs() / scale);
            }
        }
        let mut x = input.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let plus = objective(net, &x);
            x[i] = orig - h;
            let minus = objective(net, &x);
            x[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = d_input[i];
            let scale = a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max((a - numeric).abs() / scale);
        }
        max_rel
    }

    #[test]
    fn gradients_match_central_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..5 {
            let mut net = Mlp::new(&[4, 12, 8, 2], OutputMap::Identity, trial).unwrap();
            let input: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let max_rel = finite_difference_check(&mut net, &input, &upstream);
            assert!(max_rel <= 1e-4, "trial {trial}: max relative error {max_rel}");
        }
    }

    #[test]
    fn action_box_gradients_match_central_differences() {
        let output = OutputMap::ActionBox { low: vec![-2.0], high: vec![2.0] };
        let mut net = Mlp::new(&[3, 10, 1], output, 31).unwrap();
        let max_rel = finite_difference_check(&mut net, &[0.4, -0.3, 0.9], &[1.3]);
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn actor_outputs_stay_inside_box() {
        use rand::Rng;
        let output = OutputMap::ActionBox { low: vec![-2.0, 0.0], high: vec![2.0, 1.0] };
        let net = Mlp::new(&[3, 16, 2], output, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let out = net.forward(&x).unwrap();
            assert!((-2.0..=2.0).contains(&out[0]));
            assert!((0.0..=1.0).contains(&out[1]));
        }
    }

    #[test]
    fn batched_backprop_sums_per_row_gradients() {
        let net = Mlp::new(&[3, 6, 1], OutputMap::Identity, 17).unwrap();
        let rows = [[0.1, 0.2, 0.3], [-0.5, 0.4, 0.0]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let upstream = [0.7, -1.1];
        let (batched, dins) = net.backprop_batch(&flat, 2, &upstream).unwrap();
        let g0 = net.grad_params(&rows[0], &upstream[..1]).unwrap();
        let g1 = net.grad_params(&rows[1], &upstream[1..]).unwrap();
        for l in 0..g0.w.len() {
            for p in 0..batched.w[l].len() {
                let expected = g0.w[l][p] + g1.w[l][p];
                assert!((batched.w[l][p] - expected).abs() < 1e-12);
            }
        }
        let d0 = net.grad_input(&rows[0], &upstream[..1]).unwrap();
        for (a, b) in dins[..3].iter().zip(&d0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_fresh_state_zero_gradient_keeps_params() {
        let net = Mlp::new(&[2, 4, 1], OutputMap::Identity, 3).unwrap();
        let mut opt = AdamState::new(&net, 1e-3);
        let mut updated = net.clone();
        let grads = Grads::zeros(&net);
        opt.apply(&mut updated, &grads).unwrap();
        assert_eq!(net.flat_params(), updated.flat_params());
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        // With a constant gradient the bias-corrected update magnitude tends
        // to lr and the parameter moves against the gradient sign.
        let mut net = zeroed_net(&[1, 1]);
        let mut opt = AdamState::new(&net, 1e-3);
        let mut grads = Grads::zeros(&net);
        grads.w[0][0] = 2.5;
        grads.b[0][0] = -2.5;
        let mut prev_w = 0.0;
        let mut prev_b = 0.0;
        let mut last_step_w = 0.0;
        let mut last_step_b = 0.0;
        for _ in 0..500 {
            opt.apply(&mut net, &grads).unwrap();
            last_step_w = net.layers[0].w[0] - prev_w;
            last_step_b = net.layers[0].b[0] - prev_b;
            prev_w = net.layers[0].w[0];
            prev_b = net.layers[0].b[0];
        }
        assert!(net.layers[0].w[0] < 0.0);
        assert!(net.layers[0].b[0] > 0.0);
        assert!((last_step_w.abs() - 1e-3).abs() < 1e-5);
        assert!((last_step_b.abs() - 1e-3).abs() < 1e-5);
    }

    #[test]
    fn soft_update_formula_and_convergence() {
        let mut target = zeroed_net(&[1, 1]);
        let mut online = zeroed_net(&[1, 1]);
        *online.layer_mut(0).0 = vec![1.0];
        *online.layer_mut(0).1 = vec![1.0];

        // tau = 1 copies exactly.
        let mut t1 = target.clone();
        t1.soft_update_from(&online, 1.0).unwrap();
        assert_eq!(t1.layers[0].w[0], 1.0);

        // Scalar case: 0.005 * 1 + 0.995 * 0.
        target.soft_update_from(&online, 0.005).unwrap();
        assert!((target.layers[0].w[0] - 0.005).abs() < 1e-15);

        // Repeated updates with a frozen online net converge geometrically.
        for _ in 0..3000 {
            target.soft_update_from(&online, 0.005).unwrap();
        }
        assert!((target.layers[0].w[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn soft_update_rejects_mismatched_architecture() {
        let mut a = Mlp::new(&[2, 4, 1], OutputMap::Identity, 0).unwrap();
        let b = Mlp::new(&[2, 5, 1], OutputMap::Identity, 0).unwrap();
        assert!(matches!(a.soft_update_from(&b, 0.5), Err(NetError::ArchitectureMismatch)));
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let output = OutputMap::ActionBox { low: vec![-1.0], high: vec![1.0] };
        let net = Mlp::new(&[3, 8, 1], output, 42).unwrap();
        let restored = Mlp::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(net.flat_params(), restored.flat_params());
        assert_eq!(net.sizes(), restored.sizes());
        assert_eq!(net.output_map(), restored.output_map());
        assert_eq!(net.seed(), restored.seed());
    }

    #[test]
    fn snapshot_rejects_truncated_payload() {
        let net = Mlp::new(&[2, 3, 1], OutputMap::Identity, 1).unwrap();
        let mut bytes = net.to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(Mlp::from_bytes(&bytes), Err(NetError::BadHeader(_))));
    }
}
