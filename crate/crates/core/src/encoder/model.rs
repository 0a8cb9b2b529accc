use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place, LayerNormCache,
    MASK_VALUE,
};
use super::{EncoderError, Float, ModelConfig, ParameterSet, Tensor};
use crate::seed::{derive_index, derive_seed, rng_from};
use crate::tokenizer::TokenizedSequence;

/// Truncated-normal (±2 std) weights, unit layer-norm scales, zero offsets
/// and biases. Each tensor has its own seed stream keyed by name.
pub fn init_tensor<T: Float>(name: &str, shape: &[usize], config: &ModelConfig) -> Tensor<T> {
    if name.ends_with("ln.gamma") {
        return Tensor::filled(shape, T::one());
    }
    if name.ends_with(".bias") || name.ends_with("ln.beta") {
        return Tensor::zeros(shape);
    }
    let mut rng = rng_from(derive_seed(config.seed, name));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break T::of(z * config.init_std);
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn init_params<T: Float>(config: &ModelConfig) -> Result<ParameterSet<T>, EncoderError> {
    config.validate()?;
    let mut params = ParameterSet::new();
    for (name, shape) in config.expected_shapes() {
        let t = init_tensor(&name, &shape, config);
        params.insert(name, t);
    }
    Ok(params)
}

/// Per-sequence encoder result.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// `seq_len × hidden_dim`, row-major.
    pub hidden_states: Vec<T>,
    /// `tanh(W·h_[CLS] + b)`.
    pub pooled: Vec<T>,
    /// Per layer, `num_heads × seq_len × seq_len` attention probabilities.
    pub attentions: Vec<Vec<T>>,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
}

impl<T: Float> EncoderOutput<T> {
    pub fn hidden(&self, position: usize) -> &[T] {
        &self.hidden_states[position * self.hidden_dim..(position + 1) * self.hidden_dim]
    }

    /// `seq_len × seq_len` attention matrix of one head.
    pub fn attention(&self, layer: usize, head: usize) -> &[T] {
        let l2 = self.seq_len * self.seq_len;
        &self.attentions[layer][head * l2..(head + 1) * l2]
    }
}

#[derive(Debug, Clone)]
struct LayerTrace<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    probs_mask: Option<Vec<T>>,
    ctx: Vec<T>,
    attn_out_mask: Option<Vec<T>>,
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
    ffn_out_mask: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
}

/// Activations retained by a forward pass, with the dropout masks it drew.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    ids: Vec<u32>,
    segments: Vec<u8>,
    emb_ln: LayerNormCache<T>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerTrace<T>>,
    final_hidden: Vec<T>,
    pooled: Vec<T>,
}

impl<T: Float> Trace<T> {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }
}

/// Gradient of the loss with respect to the encoder outputs of one sequence.
#[derive(Debug, Clone, Default)]
pub struct Upstream<T> {
    /// `seq_len × hidden_dim`.
    pub d_hidden: Option<Vec<T>>,
    pub d_pooled: Option<Vec<T>>,
}

fn dropout_mask<T: Float>(rng: &mut ChaCha8Rng, n: usize, rate: f64, active: bool) -> Option<Vec<T>> {
    if !active || rate == 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Some(
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect(),
    )
}

fn apply_mask<T: Float>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn validate_input(seq: &TokenizedSequence, config: &ModelConfig) -> Result<(), EncoderError> {
    if seq.ids.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    if seq.ids.len() > config.max_position {
        return Err(EncoderError::SequenceTooLong {
            len: seq.ids.len(),
            max: config.max_position,
        });
    }
    if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(EncoderError::IdOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    if let Some(&s) = seq.segment_ids.iter().find(|&&s| s as usize >= config.type_vocab) {
        return Err(EncoderError::SegmentOutOfRange(s));
    }
    Ok(())
}

/// Encodes one sequence and keeps the activations needed by [`backward`].
/// Dropout is drawn from `dropout_seed` and is active only in `train_mode`.
pub fn forward_sequence<T: Float>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    seq: &TokenizedSequence,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(EncoderOutput<T>, Trace<T>), EncoderError> {
    config.validate()?;
    config.check_params(params)?;
    validate_input(seq, config)?;
    Ok(run_forward(params, config, seq, train_mode, dropout_seed))
}

fn run_forward<T: Float>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    seq: &TokenizedSequence,
    train_mode: bool,
    dropout_seed: u64,
) -> (EncoderOutput<T>, Trace<T>) {
    let (len, h, f, nh) = (seq.ids.len(), config.hidden_dim, config.ff_dim, config.num_heads);
    let dh = config.head_dim();
    let rate = config.dropout_rate;
    let mut rng = rng_from(dropout_seed);

    let word = params.data("embeddings.word");
    let pos = params.data("embeddings.position");
    let seg = params.data("embeddings.segment");
    let mut emb = vec![T::zero(); len * h];
    for i in 0..len {
        let (w, s) = (seq.ids[i] as usize, seq.segment_ids[i] as usize);
        for c in 0..h {
            emb[i * h + c] = word[w * h + c] + pos[i * h + c] + seg[s * h + c];
        }
    }
    let (mut x, emb_ln) = layer_norm(
        &emb,
        params.data("embeddings.ln.gamma"),
        params.data("embeddings.ln.beta"),
        len,
        h,
    );
    let emb_mask = dropout_mask(&mut rng, len * h, rate, train_mode);
    apply_mask(&mut x, &emb_mask);

    let key_bias: Vec<T> = seq
        .attention_mask
        .iter()
        .map(|&m| if m == 0 { T::of(MASK_VALUE) } else { T::zero() })
        .collect();
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut layers = Vec::with_capacity(config.num_layers);
    let mut attentions = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = |n: &str| params.data(&format!("layer.{l}.{n}"));
        let q = linear(&x, p("attention.query.weight"), p("attention.query.bias"), len, h, h);
        let k = linear(&x, p("attention.key.weight"), p("attention.key.bias"), len, h, h);
        let v = linear(&x, p("attention.value.weight"), p("attention.value.bias"), len, h, h);

        let mut probs = vec![T::zero(); nh * len * len];
        for hd in 0..nh {
            for i in 0..len {
                let row = &mut probs[(hd * len + i) * len..(hd * len + i + 1) * len];
                let qi = &q[i * h + hd * dh..i * h + (hd + 1) * dh];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[j * h + hd * dh..j * h + (hd + 1) * dh];
                    *r = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale + key_bias[j];
                }
                softmax_in_place(row);
            }
        }
        let probs_mask = dropout_mask(&mut rng, probs.len(), rate, train_mode);
        let mut ctx = vec![T::zero(); len * h];
        for hd in 0..nh {
            for i in 0..len {
                for j in 0..len {
                    let mut pij = probs[(hd * len + i) * len + j];
                    if let Some(m) = &probs_mask {
                        pij *= m[(hd * len + i) * len + j];
                    }
                    if pij == T::zero() {
                        continue;
                    }
                    for d in 0..dh {
                        ctx[i * h + hd * dh + d] += pij * v[j * h + hd * dh + d];
                    }
                }
            }
        }
        let mut attn_out = linear(&ctx, p("attention.output.weight"), p("attention.output.bias"), len, h, h);
        let attn_out_mask = dropout_mask(&mut rng, len * h, rate, train_mode);
        apply_mask(&mut attn_out, &attn_out_mask);
        let sum1: Vec<T> = x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();
        let (h1, ln1) = layer_norm(&sum1, p("attention.ln.gamma"), p("attention.ln.beta"), len, h);

        let f1 = linear(&h1, p("ffn.intermediate.weight"), p("ffn.intermediate.bias"), len, h, f);
        let g: Vec<T> = f1.iter().map(|&z| gelu(z)).collect();
        let mut f2 = linear(&g, p("ffn.output.weight"), p("ffn.output.bias"), len, f, h);
        let ffn_out_mask = dropout_mask(&mut rng, len * h, rate, train_mode);
        apply_mask(&mut f2, &ffn_out_mask);
        let sum2: Vec<T> = h1.iter().zip(&f2).map(|(&a, &b)| a + b).collect();
        let (out, ln2) = layer_norm(&sum2, p("ffn.ln.gamma"), p("ffn.ln.beta"), len, h);

        attentions.push(probs.clone());
        layers.push(LayerTrace {
            input: std::mem::replace(&mut x, out),
            q,
            k,
            v,
            probs,
            probs_mask,
            ctx,
            attn_out_mask,
            ln1,
            h1,
            f1,
            g,
            ffn_out_mask,
            ln2,
        });
    }

    let pooled: Vec<T> = linear(&x[..h], params.data("pooler.weight"), params.data("pooler.bias"), 1, h, h)
        .into_iter()
        .map(|z| z.tanh())
        .collect();

    let output = EncoderOutput {
        hidden_states: x.clone(),
        pooled: pooled.clone(),
        attentions,
        seq_len: len,
        hidden_dim: h,
        num_heads: nh,
    };
    let trace = Trace {
        ids: seq.ids.clone(),
        segments: seq.segment_ids.clone(),
        emb_ln,
        emb_mask,
        layers,
        final_hidden: x,
        pooled,
    };
    (output, trace)
}

/// Encodes a batch; sequence `i` draws dropout from `derive_index(seed, i)`.
pub fn forward_with_trace<T: Float>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    batch: &[TokenizedSequence],
    train_mode: bool,
    seed: u64,
) -> Result<Vec<(EncoderOutput<T>, Trace<T>)>, EncoderError> {
    config.validate()?;
    config.check_params(params)?;
    for seq in batch {
        validate_input(seq, config)?;
    }
    Ok(batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| run_forward(params, config, seq, train_mode, derive_index(seed, i as u64)))
        .collect())
}

pub fn forward<T: Float>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    batch: &[TokenizedSequence],
    train_mode: bool,
    seed: u64,
) -> Result<Vec<EncoderOutput<T>>, EncoderError> {
    Ok(forward_with_trace(params, config, batch, train_mode, seed)?
        .into_iter()
        .map(|(o, _)| o)
        .collect())
}

/// Runs `f` with mutable access to two distinct gradient tensors.
fn with_pair<T: Float, R>(
    grads: &mut ParameterSet<T>,
    a: &str,
    b: &str,
    f: impl FnOnce(&mut [T], &mut [T]) -> R,
) -> R {
    let mut tb = grads.remove(b).unwrap_or_else(|| panic!("missing gradient `{b}`"));
    let r = f(grads.data_mut(a), &mut tb.data);
    grads.insert(b, tb);
    r
}

fn unmask<T: Float>(dy: &[T], mask: &Option<Vec<T>>) -> Vec<T> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => dy.to_vec(),
    }
}

/// Accumulates into `grads` the parameter gradients of one traced sequence.
pub fn backward<T: Float>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    trace: &Trace<T>,
    upstream: &Upstream<T>,
    grads: &mut ParameterSet<T>,
) {
    let (len, h, f, nh) = (trace.seq_len(), config.hidden_dim, config.ff_dim, config.num_heads);
    let dh = config.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut dx = upstream.d_hidden.clone().unwrap_or_else(|| vec![T::zero(); len * h]);
    if let Some(dp) = &upstream.d_pooled {
        let dz: Vec<T> = dp
            .iter()
            .zip(&trace.pooled)
            .map(|(&g, &p)| g * (T::one() - p * p))
            .collect();
        with_pair(grads, "pooler.weight", "pooler.bias", |dw, db| {
            linear_backward(
                &trace.final_hidden[..h],
                params.data("pooler.weight"),
                &dz,
                1,
                h,
                h,
                dw,
                db,
                Some(&mut dx[..h]),
            )
        });
    }

    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let name = |n: &str| format!("layer.{l}.{n}");
        let p = |n: &str| params.data(&name(n));

        let dsum2 = with_pair(grads, &name("ffn.ln.gamma"), &name("ffn.ln.beta"), |dg, db| {
            layer_norm_backward(&dx, p("ffn.ln.gamma"), &lt.ln2, len, h, dg, db)
        });
        let mut dh1 = dsum2.clone();
        let df2 = unmask(&dsum2, &lt.ffn_out_mask);
        let mut dg = vec![T::zero(); len * f];
        with_pair(grads, &name("ffn.output.weight"), &name("ffn.output.bias"), |dw, db| {
            linear_backward(&lt.g, p("ffn.output.weight"), &df2, len, f, h, dw, db, Some(&mut dg))
        });
        let df1: Vec<T> = dg.iter().zip(&lt.f1).map(|(&g, &z)| g * gelu_grad(z)).collect();
        with_pair(grads, &name("ffn.intermediate.weight"), &name("ffn.intermediate.bias"), |dw, db| {
            linear_backward(&lt.h1, p("ffn.intermediate.weight"), &df1, len, h, f, dw, db, Some(&mut dh1))
        });

        let dsum1 = with_pair(grads, &name("attention.ln.gamma"), &name("attention.ln.beta"), |dg, db| {
            layer_norm_backward(&dh1, p("attention.ln.gamma"), &lt.ln1, len, h, dg, db)
        });
        let mut dx_in = dsum1.clone();
        let da = unmask(&dsum1, &lt.attn_out_mask);
        let mut dctx = vec![T::zero(); len * h];
        with_pair(grads, &name("attention.output.weight"), &name("attention.output.bias"), |dw, db| {
            linear_backward(&lt.ctx, p("attention.output.weight"), &da, len, h, h, dw, db, Some(&mut dctx))
        });

        let mut dq = vec![T::zero(); len * h];
        let mut dk = vec![T::zero(); len * h];
        let mut dv = vec![T::zero(); len * h];
        let mut dp_row = vec![T::zero(); len];
        for hd in 0..nh {
            let off = hd * dh;
            for i in 0..len {
                let base = (hd * len + i) * len;
                let dci = &dctx[i * h + off..i * h + off + dh];
                for j in 0..len {
                    let vj = &lt.v[j * h + off..j * h + off + dh];
                    let mut g = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                    let mut pd = lt.probs[base + j];
                    if let Some(m) = &lt.probs_mask {
                        g *= m[base + j];
                        pd *= m[base + j];
                    }
                    dp_row[j] = g;
                    if pd != T::zero() {
                        for d in 0..dh {
                            dv[j * h + off + d] += pd * dci[d];
                        }
                    }
                }
                let probs = &lt.probs[base..base + len];
                let dot = probs.iter().zip(&dp_row).map(|(&a, &b)| a * b).sum::<T>();
                for j in 0..len {
                    let ds = probs[j] * (dp_row[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for d in 0..dh {
                        dq[i * h + off + d] += ds * lt.k[j * h + off + d];
                        dk[j * h + off + d] += ds * lt.q[i * h + off + d];
                    }
                }
            }
        }
        for (proj, dy) in [("query", &dq), ("key", &dk), ("value", &dv)] {
            let w = format!("attention.{proj}.weight");
            let b = format!("attention.{proj}.bias");
            with_pair(grads, &name(&w), &name(&b), |dw, db| {
                linear_backward(&lt.input, p(&w), dy, len, h, h, dw, db, Some(&mut dx_in))
            });
        }
        dx = dx_in;
    }

    let demb_ln = unmask(&dx, &trace.emb_mask);
    let demb = with_pair(grads, "embeddings.ln.gamma", "embeddings.ln.beta", |dg, db| {
        layer_norm_backward(&demb_ln, params.data("embeddings.ln.gamma"), &trace.emb_ln, len, h, dg, db)
    });
    {
        let dword = grads.data_mut("embeddings.word");
        for (i, &id) in trace.ids.iter().enumerate() {
            let row = id as usize * h;
            for c in 0..h {
                dword[row + c] += demb[i * h + c];
            }
        }
    }
    {
        let dpos = grads.data_mut("embeddings.position");
        for (d, &g) in dpos.iter_mut().zip(&demb) {
            *d += g;
        }
    }
    let dseg = grads.data_mut("embeddings.segment");
    for (i, &s) in trace.segments.iter().enumerate() {
        let row = s as usize * h;
        for c in 0..h {
            dseg[row + c] += demb[i * h + c];
        }
    }
}

/// Sum of per-sequence gradients, as a fresh gradient set shaped like `params`.
pub fn backward_batch<T: Float>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    traces: &[Trace<T>],
    upstreams: &[Upstream<T>],
) -> ParameterSet<T> {
    assert_eq!(traces.len(), upstreams.len(), "one upstream gradient per trace");
    let mut grads = params.zeros_like();
    for (t, u) in traces.iter().zip(upstreams) {
        backward(params, config, t, u, &mut grads);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            num_heads: heads,
            hidden_dim: 16,
            ff_dim: 32,
            vocab_size: 50,
            max_position: 16,
            dropout_rate: 0.0,
            init_std: 0.3,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    fn seq(ids: &[u32], real: usize) -> TokenizedSequence {
        let n = ids.len();
        TokenizedSequence {
            ids: ids.to_vec(),
            tokens: ids.iter().map(|i| i.to_string()).collect(),
            attention_mask: (0..n).map(|i| u8::from(i < real)).collect(),
            segment_ids: (0..n).map(|i| u8::from(i >= n / 2 && i < real)).collect(),
        }
    }

    fn probe(len: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng_from(5);
        let a = (0..len * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        (a, b)
    }

    fn probe_loss(params: &ParameterSet<f64>, c: &ModelConfig, s: &TokenizedSequence, seed: u64, train: bool) -> f64 {
        let (wh, wp) = probe(s.len(), c.hidden_dim);
        let (out, _) = forward_sequence(params, c, s, train, seed).unwrap();
        out.hidden_states.iter().zip(&wh).map(|(a, b)| a * b).sum::<f64>()
            + out.pooled.iter().zip(&wp).map(|(a, b)| a * b).sum::<f64>()
    }

    fn check_gradients(c: &ModelConfig, s: &TokenizedSequence, train: bool) {
        let params: ParameterSet<f64> = init_params(c).unwrap();
        let (wh, wp) = probe(s.len(), c.hidden_dim);
        let (_, trace) = forward_sequence(&params, c, s, train, 77).unwrap();
        let mut grads = params.zeros_like();
        let up = Upstream {
            d_hidden: Some(wh),
            d_pooled: Some(wp),
        };
        backward(&params, c, &trace, &up, &mut grads);
        let names: Vec<String> = params.names().filter(|n| !super::super::is_head_tensor(n)).cloned().collect();
        let mut rng = rng_from(123);
        let h = 1e-5;
        for _ in 0..60 {
            let name = &names[rng.random_range(0..names.len())];
            let idx = rng.random_range(0..params.data(name).len());
            let (mut p, mut m) = (params.clone(), params.clone());
            p.data_mut(name)[idx] += h;
            m.data_mut(name)[idx] -= h;
            let num = (probe_loss(&p, c, s, 77, train) - probe_loss(&m, c, s, 77, train)) / (2.0 * h);
            let ana = grads.data(name)[idx];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-5);
            assert!(rel <= 1e-4, "{name}[{idx}]: analytic {ana}, numeric {num}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(&cfg(2, 2), &seq(&[2, 7, 9, 3, 11, 3, 0, 0], 6), false);
    }

    #[test]
    fn gradients_with_recorded_dropout() {
        let c = ModelConfig { dropout_rate: 0.2, ..cfg(1, 2) };
        check_gradients(&c, &seq(&[2, 7, 9, 3, 11, 3], 6), true);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let c = ModelConfig { num_heads: 1, ..cfg(1, 1) };
        let p: ParameterSet<f64> = init_params(&c).unwrap();
        let (out, _) = forward_sequence(&p, &c, &seq(&[2], 1), false, 0).unwrap();
        assert_eq!(out.attentions, vec![vec![1.0]]);
    }

    #[test]
    fn padding_gets_no_attention_and_rows_sum_to_one() {
        let c = cfg(2, 2);
        let p: ParameterSet<f32> = init_params(&c).unwrap();
        let s = seq(&[2, 5, 6, 3, 0, 0, 0], 4);
        let (out, _) = forward_sequence(&p, &c, &s, false, 0).unwrap();
        for l in 0..2 {
            for hd in 0..2 {
                let a = out.attention(l, hd);
                for i in 0..7 {
                    let row = &a[i * 7..(i + 1) * 7];
                    assert!(row[4..].iter().all(|&v| v == 0.0));
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn trimming_padding_is_bitwise_neutral() {
        let c = cfg(2, 2);
        let p: ParameterSet<f32> = init_params(&c).unwrap();
        let s = seq(&[2, 5, 6, 3, 0, 0, 0], 4);
        let (full, _) = forward_sequence(&p, &c, &s, false, 0).unwrap();
        let (trim, _) = forward_sequence(&p, &c, &s.trimmed(), false, 0).unwrap();
        assert_eq!(&full.hidden_states[..4 * 16], &trim.hidden_states[..]);
        assert_eq!(full.pooled, trim.pooled);
    }

    #[test]
    fn zero_dropout_ignores_train_mode_and_runs_are_deterministic() {
        let c = cfg(2, 2);
        let p: ParameterSet<f32> = init_params(&c).unwrap();
        let batch = vec![seq(&[2, 5, 6, 3], 4), seq(&[2, 8, 3, 0], 3)];
        let a = forward(&p, &c, &batch, true, 1).unwrap();
        let b = forward(&p, &c, &batch, false, 2).unwrap();
        assert_eq!(a, b);
        let d = ModelConfig { dropout_rate: 0.3, ..c.clone() };
        let x = forward(&p, &d, &batch, true, 9).unwrap();
        let y = forward(&p, &d, &batch, true, 9).unwrap();
        assert_eq!(x, y);
        assert_ne!(x, forward(&p, &d, &batch, false, 9).unwrap());
    }

    #[test]
    fn permutation_symmetry_without_positions() {
        let c = cfg(2, 2);
        let mut p: ParameterSet<f64> = init_params(&c).unwrap();
        p.data_mut("embeddings.position").iter_mut().for_each(|v| *v = 0.0);
        let mut s = seq(&[2, 5, 6, 9, 3], 5);
        s.segment_ids = vec![0; 5];
        let mut t = s.clone();
        t.ids.swap(1, 3);
        let (a, _) = forward_sequence(&p, &c, &s, false, 0).unwrap();
        let (b, _) = forward_sequence(&p, &c, &t, false, 0).unwrap();
        for (i, j) in [(0, 0), (1, 3), (2, 2), (3, 1), (4, 4)] {
            for (x, y) in a.hidden(i).iter().zip(b.hidden(j)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_gradient_is_sum_and_zero_upstream_is_zero() {
        let c = cfg(1, 2);
        let p: ParameterSet<f64> = init_params(&c).unwrap();
        let batch = vec![seq(&[2, 5, 6, 3], 4), seq(&[2, 8, 3, 0], 3)];
        let traced = forward_with_trace(&p, &c, &batch, false, 0).unwrap();
        let traces: Vec<_> = traced.into_iter().map(|(_, t)| t).collect();
        let ups: Vec<Upstream<f64>> = (0..2)
            .map(|k| Upstream {
                d_hidden: Some((0..64).map(|i| ((i + k) as f64).sin()).collect()),
                d_pooled: None,
            })
            .collect();
        let total = backward_batch(&p, &c, &traces, &ups);
        let mut sum = p.zeros_like();
        for (t, u) in traces.iter().zip(&ups) {
            let mut g = p.zeros_like();
            backward(&p, &c, t, u, &mut g);
            sum.add_assign(&g);
        }
        for (name, t) in total.iter() {
            for (a, b) in t.data.iter().zip(sum.data(name)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zero = backward_batch(&p, &c, &traces, &[Upstream::default(), Upstream::default()]);
        assert!(zero.iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_statistics() {
        let c = ModelConfig { vocab_size: 625, init_std: 0.02, ..cfg(1, 2) };
        let p: ParameterSet<f32> = init_params(&c).unwrap();
        let w = p.data("embeddings.word");
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / 1e4;
        assert!(mean.abs() <= 3.0 * 0.02 / 100.0, "{mean}");
        assert!(w.iter().all(|v| v.abs() <= 0.04));
        assert!(p.data("layer.0.ffn.ln.gamma").iter().all(|&v| v == 1.0));
        assert!(p.bitwise_eq(&init_params(&c).unwrap()));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let c = cfg(1, 2);
        let p: ParameterSet<f32> = init_params(&c).unwrap();
        assert!(matches!(
            forward_sequence(&p, &c, &seq(&[2, 50], 2), false, 0),
            Err(EncoderError::IdOutOfRange { id: 50, .. })
        ));
        let long: Vec<u32> = vec![4; 17];
        assert!(matches!(
            forward_sequence(&p, &c, &seq(&long, 17), false, 0),
            Err(EncoderError::SequenceTooLong { .. })
        ));
    }
}
