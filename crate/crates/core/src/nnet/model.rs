//! Forward pass, loss and backpropagation.

use rayon::prelude::*;

use super::{Batch, ModelKind, ModelSpec, NnError, ParamVector, RESIDUAL_KERNEL};

/// Samples per parallel work unit. Fixed so gradient sums do not depend on
/// the thread count.
const CHUNK: usize = 4;

/// Output pixels per convolution tile; keeps the unrolled rows cache-resident.
const PIXEL_TILE: usize = 64;

/// Per-layer parameter slices, resolved once per call.
struct Net<'a> {
    spec: &'a ModelSpec,
    params: &'a [f64],
    offsets: Vec<usize>,
}

impl<'a> Net<'a> {
    fn new(spec: &'a ModelSpec, params: &'a ParamVector) -> Result<Self, NnError> {
        spec.validate()?;
        params.matches_spec(spec)?;
        Ok(Net {
            spec,
            params: &params.values,
            offsets: params.layout.slots.iter().map(|s| s.offset).collect(),
        })
    }

    fn weight(&self, layer: usize) -> &'a [f64] {
        &self.params[self.offsets[2 * layer]..self.offsets[2 * layer + 1]]
    }

    fn bias(&self, layer: usize) -> &'a [f64] {
        let end = self.offsets.get(2 * layer + 2).copied().unwrap_or(self.params.len());
        &self.params[self.offsets[2 * layer + 1]..end]
    }

    fn residual_layer(&self) -> Option<usize> {
        self.spec.residual_channels.map(|_| self.spec.conv_blocks.len())
    }

    fn first_head_layer(&self) -> usize {
        self.spec.conv_blocks.len() + if self.spec.residual_channels.is_some() { 2 } else { 0 }
    }

    /// Layer owns at least one trainable tensor.
    fn trainable(&self, layer: usize) -> bool {
        2 * layer + 1 >= self.spec.frozen_prefix
    }
}

/// Unrolls same-padded `k`x`k` windows: row `(c * k + ky) * k + kx` holds
/// that tap for every output pixel, zero outside the input.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        let in_c = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = (p.saturating_sub(kx), (w + p).saturating_sub(kx).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < p || sy >= h + p || x0 >= x1 {
                        continue;
                    }
                    let src = &in_c[(sy - p) * w + x0 + kx - p..(sy - p) * w + x1 + kx - p];
                    row[y * w + x0..y * w + x1].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let hw = h * w;
    let mut out = vec![0.0; cin * hw];
    for c in 0..cin {
        let out_c = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = (p.saturating_sub(kx), (w + p).saturating_sub(kx).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < p || sy >= h + p || x0 >= x1 {
                        continue;
                    }
                    let dst = &mut out_c[(sy - p) * w + x0 + kx - p..(sy - p) * w + x1 + kx - p];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with four fixed-order partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Same-padded 2-D convolution over `cin` maps of `h`x`w`.
/// Returns the unrolled input (kept for backprop) and the output maps.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let taps = cin * k * k;
    let cols = im2col(input, cin, h, w, k);
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        out[o * hw..(o + 1) * hw].fill(bias[o]);
    }
    for t in (0..hw).step_by(PIXEL_TILE) {
        let te = (t + PIXEL_TILE).min(hw);
        for o in 0..cout {
            let out_o = &mut out[o * hw + t..o * hw + te];
            for (r, wv) in weight[o * taps..(o + 1) * taps].iter().enumerate() {
                axpy(out_o, *wv, &cols[r * hw + t..r * hw + te]);
            }
        }
    }
    (cols, out)
}

/// Gradients of a same-padded convolution. Accumulates into `dweight` and
/// `dbias` when given; returns the input gradient when `need_input`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    dout: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    need_input: bool,
) -> Option<Vec<f64>> {
    let hw = h * w;
    let taps = cin * k * k;
    if let Some((dweight, dbias)) = grads {
        for o in 0..cout {
            dbias[o] += dout[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        for t in (0..hw).step_by(PIXEL_TILE) {
            let te = (t + PIXEL_TILE).min(hw);
            for o in 0..cout {
                let d_o = &dout[o * hw + t..o * hw + te];
                for (r, dw) in dweight[o * taps..(o + 1) * taps].iter_mut().enumerate() {
                    *dw += dot(d_o, &cols[r * hw + t..r * hw + te]);
                }
            }
        }
    }
    if !need_input {
        return None;
    }
    let mut dcols = vec![0.0; taps * hw];
    for t in (0..hw).step_by(PIXEL_TILE) {
        let te = (t + PIXEL_TILE).min(hw);
        for o in 0..cout {
            let d_o = &dout[o * hw + t..o * hw + te];
            for (r, wv) in weight[o * taps..(o + 1) * taps].iter().enumerate() {
                axpy(&mut dcols[r * hw + t..r * hw + te], *wv, d_o);
            }
        }
    }
    Some(col2im(&dcols, cin, h, w, k))
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was zero.
fn relu_mask(grad: &mut [f64], activated: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Non-overlapping max pooling; returns pooled maps and the flat argmax of
/// each output cell (first maximum wins).
fn max_pool(input: &[f64], c: usize, h: usize, w: usize, s: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / s, w / s);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for dy in 0..s {
                    for dx in 0..s {
                        let idx = (ch * h + oy * s + dy) * w + ox * s + dx;
                        if input[idx] > best {
                            best = input[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    (out, arg)
}

struct BlockTrace {
    cin: usize,
    h: usize,
    w: usize,
    cols: Vec<f64>,
    /// Post-ReLU activations before pooling.
    activated: Vec<f64>,
    argmax: Option<Vec<usize>>,
}

struct ResidualTrace {
    c: usize,
    h: usize,
    w: usize,
    pad_a: Vec<f64>,
    mid: Vec<f64>,
    pad_b: Vec<f64>,
    out: Vec<f64>,
}

struct Trace {
    blocks: Vec<BlockTrace>,
    residual: Option<ResidualTrace>,
    /// Inputs of each head layer (the pooled feature vector first).
    head_inputs: Vec<Vec<f64>>,
    spatial: usize,
    logits: Vec<f64>,
}

fn forward_sample(net: &Net, input: &[f64], h0: usize, w0: usize, keep: bool) -> Trace {
    let spec = net.spec;
    let mut x = input.to_vec();
    let (mut cin, mut h, mut w) = (spec.input_channels(), h0, w0);
    let mut blocks = Vec::new();
    for (l, b) in spec.conv_blocks.iter().enumerate() {
        let (cols, mut z) = conv_forward(&x, cin, h, w, net.weight(l), net.bias(l), b.channels, b.kernel);
        relu_in_place(&mut z);
        let (next, argmax) = if b.pool > 1 {
            let (pooled, arg) = max_pool(&z, b.channels, h, w, b.pool);
            (pooled, Some(arg))
        } else {
            (z.clone(), None)
        };
        let (ph, pw) = (h / b.pool, w / b.pool);
        if keep {
            blocks.push(BlockTrace {
                cin,
                h,
                w,
                cols,
                activated: z,
                argmax,
            });
        }
        x = next;
        cin = b.channels;
        h = ph;
        w = pw;
    }

    let mut residual = None;
    if let Some(l) = net.residual_layer() {
        let c = cin;
        let (pad_a, mut mid) = conv_forward(&x, c, h, w, net.weight(l), net.bias(l), c, RESIDUAL_KERNEL);
        relu_in_place(&mut mid);
        let (pad_b, branch) = conv_forward(&mid, c, h, w, net.weight(l + 1), net.bias(l + 1), c, RESIDUAL_KERNEL);
        let mut out: Vec<f64> = x.iter().zip(&branch).map(|(a, b)| a + b).collect();
        relu_in_place(&mut out);
        x = out.clone();
        if keep {
            residual = Some(ResidualTrace {
                c,
                h,
                w,
                pad_a,
                mid,
                pad_b,
                out,
            });
        }
    }

    let spatial = h * w;
    let mut features: Vec<f64> = (0..cin)
        .map(|c| x[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64)
        .collect();
    let mut head_inputs = Vec::new();
    let first = net.first_head_layer();
    let n_head = spec.head_hidden.len() + 1;
    for j in 0..n_head {
        let l = first + j;
        let wt = net.weight(l);
        let bs = net.bias(l);
        let fan_in = features.len();
        let mut out: Vec<f64> = bs
            .iter()
            .enumerate()
            .map(|(o, &b)| b + wt[o * fan_in..(o + 1) * fan_in].iter().zip(&features).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        if j + 1 < n_head {
            relu_in_place(&mut out);
        }
        head_inputs.push(std::mem::replace(&mut features, out));
    }
    Trace {
        blocks,
        residual,
        head_inputs,
        spatial,
        logits: features,
    }
}

/// Loss of one sample and its gradient with respect to the logits.
fn sample_loss(kind: ModelKind, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    match kind {
        ModelKind::PatchClassifier => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - m).exp()).sum();
            let lse = m + sum.ln();
            let grad = logits
                .iter()
                .enumerate()
                .map(|(k, z)| (z - lse).exp() - if k == label { 1.0 } else { 0.0 })
                .collect();
            (lse - logits[label], grad)
        }
        ModelKind::WholeImageClassifier => {
            let z = logits[0];
            let y = label as f64;
            let loss = z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
            (loss, vec![sigmoid(z) - y])
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Backpropagates `dlogits`, accumulating into `grad` (full parameter length).
fn backward_sample(net: &Net, trace: &Trace, dlogits: Vec<f64>, grad: &mut [f64]) {
    let spec = net.spec;
    let offsets = &net.offsets;
    let first = net.first_head_layer();
    let n_head = spec.head_hidden.len() + 1;

    let mut delta = dlogits;
    for j in (0..n_head).rev() {
        let l = first + j;
        let input = &trace.head_inputs[j];
        let fan_in = input.len();
        if j + 1 < n_head {
            // delta arrives w.r.t. the ReLU output, which is the next layer's input
            relu_mask(&mut delta, &trace.head_inputs[j + 1]);
        }
        if net.trainable(l) {
            let (wo, bo) = (offsets[2 * l], offsets[2 * l + 1]);
            for (o, &d) in delta.iter().enumerate() {
                grad[bo + o] += d;
                for (g, v) in grad[wo + o * fan_in..wo + (o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * v;
                }
            }
        }
        if l == 0 || !net.trainable(l - 1) {
            return;
        }
        let wt = net.weight(l);
        let mut prev = vec![0.0; fan_in];
        for (o, &d) in delta.iter().enumerate() {
            for (p, wv) in prev.iter_mut().zip(&wt[o * fan_in..(o + 1) * fan_in]) {
                *p += d * wv;
            }
        }
        delta = prev;
    }

    // global average pooling
    let spatial = trace.spatial;
    let mut dmap: Vec<f64> = delta
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d / spatial as f64, spatial))
        .collect();

    if let (Some(l), Some(rt)) = (net.residual_layer(), trace.residual.as_ref()) {
        relu_mask(&mut dmap, &rt.out);
        let (c, h, w) = (rt.c, rt.h, rt.w);
        let need_skip = l > 0 && net.trainable(l - 1);
        let grads_b = net.trainable(l + 1).then(|| {
            let (wo, bo, end) = (offsets[2 * l + 2], offsets[2 * l + 3], offsets[2 * l + 4]);
            split_grad(grad, wo, bo, end)
        });
        let mut dmid = conv_backward(&rt.pad_b, c, h, w, net.weight(l + 1), c, RESIDUAL_KERNEL, &dmap, grads_b, true)
            .expect("input gradient requested");
        relu_mask(&mut dmid, &rt.mid);
        let grads_a = net.trainable(l).then(|| {
            let (wo, bo, end) = (offsets[2 * l], offsets[2 * l + 1], offsets[2 * l + 2]);
            split_grad(grad, wo, bo, end)
        });
        let dx = conv_backward(&rt.pad_a, c, h, w, net.weight(l), c, RESIDUAL_KERNEL, &dmid, grads_a, need_skip);
        if !need_skip {
            return;
        }
        for (a, b) in dmap.iter_mut().zip(dx.expect("requested")) {
            *a += b;
        }
    }

    for (l, (bt, b)) in trace.blocks.iter().zip(&spec.conv_blocks).enumerate().rev() {
        if !net.trainable(l) {
            return;
        }
        let mut dact = match &bt.argmax {
            Some(arg) => {
                let mut d = vec![0.0; bt.activated.len()];
                for (&idx, &g) in arg.iter().zip(&dmap) {
                    d[idx] += g;
                }
                d
            }
            None => dmap,
        };
        relu_mask(&mut dact, &bt.activated);
        let need_input = l > 0 && net.trainable(l - 1);
        let end = offsets.get(2 * l + 2).copied().unwrap_or(grad.len());
        let grads = split_grad(grad, offsets[2 * l], offsets[2 * l + 1], end);
        match conv_backward(&bt.cols, bt.cin, bt.h, bt.w, net.weight(l), b.channels, b.kernel, &dact, Some(grads), need_input) {
            Some(d) => dmap = d,
            None => return,
        }
    }
}

fn split_grad(grad: &mut [f64], wo: usize, bo: usize, end: usize) -> (&mut [f64], &mut [f64]) {
    let (w, b) = grad[wo..end].split_at_mut(bo - wo);
    (w, b)
}

/// Logits for every sample, `N x output_size` row-major.
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<f64>, NnError> {
    let net = Net::new(spec, params)?;
    batch.check_for(spec)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let rows: Vec<Vec<f64>> = idx
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            chunk
                .iter()
                .map(|&i| forward_sample(&net, batch.sample(i), batch.height, batch.width, false).logits)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(rows.concat())
}

/// Mean loss over the batch and its gradient. Gradient entries of frozen
/// tensors are exactly zero.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector), NnError> {
    let net = Net::new(spec, params)?;
    batch.check_for(spec)?;
    let n = batch.len();
    let p = params.len();
    let idx: Vec<usize> = (0..n).collect();
    let partials: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; p];
            let mut loss = 0.0;
            for &i in chunk {
                let trace = forward_sample(&net, batch.sample(i), batch.height, batch.width, true);
                let (l, dlogits) = sample_loss(spec.kind, &trace.logits, batch.labels[i]);
                loss += l;
                backward_sample(&net, &trace, dlogits, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; p];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    let frozen = params.layout.prefix_len(spec.frozen_prefix);
    grad[..frozen].fill(0.0);
    Ok((loss * scale, ParamVector::new(grad, params.layout.clone())?))
}

/// Maps logits to probabilities: softmax rows for multiclass output,
/// sigmoid for a single output.
pub fn probabilities(output_size: usize, logits: &[f64]) -> Vec<f64> {
    if output_size == 1 {
        return logits.iter().map(|&z| sigmoid(z)).collect();
    }
    logits
        .chunks(output_size)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

pub fn predict_proba(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<f64>, NnError> {
    Ok(probabilities(spec.output_size, &forward(spec, params, batch)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_params, sgd_step, ImageHeadConfig};
    use rand::{Rng, SeedableRng};

    fn random_batch(n: usize, size: usize, classes: usize, seed: u64) -> Batch {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..n * size * size).map(|_| r.random::<f64>()).collect();
        let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
        Batch::new(size, size, inputs, labels).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits_and_uniform_loss() {
        let spec = ModelSpec::patch_classifier();
        let params = ParamVector::zeros(std::sync::Arc::new(spec.layout()));
        let batch = random_batch(3, 16, 5, 1);
        let logits = forward(&spec, &params, &batch).unwrap();
        assert_eq!(logits.len(), 15);
        assert!(logits.iter().all(|&z| z == 0.0));
        let (loss, _) = loss_and_grad(&spec, &params, &batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);

        let patch = init_params(&spec, 0).unwrap();
        let (ispec, _) = crate::nnet::derive_image_model(&spec, &patch, &ImageHeadConfig::default(), 0).unwrap();
        let zeros = ParamVector::zeros(std::sync::Arc::new(ispec.layout()));
        let batch = random_batch(2, 32, 2, 2);
        let (loss, _) = loss_and_grad(&ispec, &zeros, &batch).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_give_duplicated_logits() {
        let spec = ModelSpec::patch_classifier();
        let params = init_params(&spec, 5).unwrap();
        let batch = random_batch(2, 16, 5, 3).select(&[0, 1, 0]);
        let logits = forward(&spec, &params, &batch).unwrap();
        assert_eq!(logits[0..5], logits[10..15]);
    }

    #[test]
    fn frozen_tensors_never_move() {
        let patch_spec = ModelSpec::patch_classifier();
        let patch = init_params(&patch_spec, 1).unwrap();
        let (spec, mut params) = derive_image_model_default(&patch_spec, &patch);
        let start = params.clone();
        let batch = random_batch(4, 32, 2, 9);
        for _ in 0..5 {
            let (_, g) = loss_and_grad(&spec, &params, &batch).unwrap();
            let frozen = params.layout.prefix_len(spec.frozen_prefix);
            assert!(g.values[..frozen].iter().all(|&v| v == 0.0));
            params = sgd_step(&params, &g, 0.1).unwrap();
        }
        let frozen = params.layout.prefix_len(spec.frozen_prefix);
        assert_eq!(params.values[..frozen], start.values[..frozen]);
        assert_ne!(params.values[frozen..], start.values[frozen..]);
    }

    fn derive_image_model_default(spec: &ModelSpec, p: &ParamVector) -> (ModelSpec, ParamVector) {
        crate::nnet::derive_image_model(spec, p, &ImageHeadConfig::default(), 7).unwrap()
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let spec = ModelSpec::patch_classifier();
        let params = init_params(&spec, 0).unwrap();
        let mut other = spec.clone();
        other.conv_blocks[0].channels = 4;
        let batch = random_batch(1, 16, 5, 0);
        assert!(matches!(forward(&other, &params, &batch), Err(NnError::LayoutMismatch(_))));
        let bad_labels = Batch::new(16, 16, vec![0.0; 256], vec![7]).unwrap();
        assert!(matches!(forward(&spec, &params, &bad_labels), Err(NnError::InvalidBatch(_))));
    }

    #[test]
    fn probabilities_are_normalized() {
        let p = probabilities(3, &[1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]);
        assert!((p[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3] - 1.0).abs() < 1e-12);
        assert_eq!(probabilities(1, &[0.0]), vec![0.5]);
    }
}
