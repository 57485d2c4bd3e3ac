//! Trainable layers and optimization: named parameter sets, dense layers,
//! inverted dropout, weight-only L2 penalties, Glorot initialization, Adam,
//! and the checkpoint container.

use std::collections::HashSet;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;

use crate::tensor::{Gradients, Tape, Tensor, Value};
use crate::{Error, Result};

/// Handle to one named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// An ordered, named collection of gradient-carrying tensors.
///
/// Insertion order is the canonical order everywhere: optimizer moments,
/// checkpoint layout, and gradient application all follow it, which keeps
/// training runs byte-for-byte reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name and marks it trainable.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !name.is_empty() && !name.contains(['\t', '\n']),
            "param name must be non-empty without tabs/newlines: {name:?}"
        );
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Places every parameter on a tape as a gradient-carrying leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            values: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }
}

/// Tape leaves for one [`ParamSet`], valid while the tape lives.
pub struct BoundParams<'t> {
    values: Vec<Value<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn value(&self, id: ParamId) -> Value<'t> {
        self.values[id.0]
    }
}

/// Glorot (fan-balanced) uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data)
}

/// A fully connected layer `x.W + b` with a per-layer L2 factor on `W`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
    pub l2_factor: f64,
}

/// The L2 factor used throughout the unified and baseline models.
pub const L2_FACTOR: f64 = 0.0005;

impl Dense {
    /// Glorot-initialized weight, zero bias, registered as
    /// `{name}.weight` / `{name}.bias`.
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        l2_factor: f64,
    ) -> Self {
        let weight = params.add(
            &format!("{name}.weight"),
            glorot_uniform(rng, vec![input_dim, output_dim], input_dim, output_dim),
        );
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(vec![output_dim]));
        Dense {
            weight,
            bias,
            input_dim,
            output_dim,
            l2_factor,
        }
    }

    pub fn forward<'t>(&self, bound: &BoundParams<'t>, x: Value<'t>) -> Value<'t> {
        x.matmul(bound.value(self.weight))
            .add_bias(bound.value(self.bias))
    }

    /// `in*out + out`, the closed-form scalar count.
    pub fn parameter_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// Whether stochastic pieces (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: in train mode each entry is zeroed independently with
/// probability `rate` and survivors are scaled by `1/(1-rate)`; eval mode is
/// the identity.
pub fn dropout<'t, R: Rng>(
    tape: &'t Tape,
    x: Value<'t>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Value<'t> {
    assert!(
        (0.0..1.0).contains(&rate),
        "dropout: rate must be in [0, 1), got {rate}"
    );
    if mode == Mode::Eval || rate == 0.0 {
        return x;
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    x.mul(tape.constant(x.shape(), mask))
}

/// Weight-only L2 penalty `sum_layers l2_factor * sum(W^2)` as a tape node.
/// Biases are excluded.
pub fn l2_penalty<'t>(bound: &BoundParams<'t>, layers: &[Dense]) -> Value<'t> {
    let mut total: Option<Value<'t>> = None;
    for layer in layers {
        if layer.l2_factor == 0.0 {
            continue;
        }
        let w = bound.value(layer.weight);
        let term = w.mul(w).sum().scale(layer.l2_factor);
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    total.expect("l2_penalty: no layers with a nonzero factor")
}

/// Adam with bias correction. Moment buffers are keyed by parameter
/// insertion order and sized on first use.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    /// Defaults beyond the learning rate: β1 0.9, β2 0.999, ε 1e-8.
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients of a bound forward pass.
    ///
    /// Fails without touching any parameter if some gradient is non-finite,
    /// naming the offending parameter.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        bound: &BoundParams<'_>,
        grads: &Gradients,
    ) -> Result<()> {
        for id in params.ids() {
            let g = grads.wrt(bound.value(id));
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {}",
                    params.name(id)
                )));
            }
        }
        if self.first_moment.is_empty() {
            for id in params.ids() {
                let n = params.get(id).numel();
                self.first_moment.push(vec![0.0; n]);
                self.second_moment.push(vec![0.0; n]);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let m_corr = 1.0 - self.beta1.powi(t);
        let v_corr = 1.0 - self.beta2.powi(t);
        for id in params.ids() {
            let g = grads.wrt(bound.value(id));
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let w = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / m_corr;
                let v_hat = v[i] / v_corr;
                w[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Checkpoint: header meta lines plus every parameter, restorable
/// bit-exactly.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamSet,
}

const CHECKPOINT_MAGIC: &str = "CKPT v1";

/// Writes the flat binary checkpoint container.
///
/// Layout: a UTF-8 text header (`CKPT v1`, `meta<TAB>key<TAB>value` lines,
/// `tensor<TAB>name<TAB>dims<TAB>byte-offset` lines, `data<TAB>count`)
/// followed by `count` little-endian 64-bit floats. Offsets are relative to
/// the start of the payload.
pub fn save_checkpoint(path: &Path, meta: &[(String, String)], params: &ParamSet) -> Result<()> {
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    for (key, value) in meta {
        assert!(
            !key.contains(['\t', '\n']) && !value.contains('\n'),
            "checkpoint meta key/value must not contain tabs or newlines: {key:?}"
        );
        header.push_str(&format!("meta\t{key}\t{value}\n"));
    }
    let mut offset = 0usize;
    let mut count = 0usize;
    for id in params.ids() {
        let t = params.get(id);
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "tensor\t{}\t{}\t{}\n",
            params.name(id),
            dims.join(" "),
            offset
        ));
        offset += t.numel() * 8;
        count += t.numel();
    }
    header.push_str(&format!("data\t{count}\n"));

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(header.as_bytes())?;
    for id in params.ids() {
        for v in params.get(id).data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint back; tensors come out in file order with gradients
/// enabled.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: String| Error::Format(format!("checkpoint {}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String> {
        let start = pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| bad("truncated header".to_string()))?;
        pos = end + 1;
        String::from_utf8(bytes[start..end].to_vec())
            .map_err(|_| bad("header is not UTF-8".to_string()))
    };

    if next_line(&bytes)? != CHECKPOINT_MAGIC {
        return Err(bad(format!("missing `{CHECKPOINT_MAGIC}` magic")));
    }

    let mut meta = Vec::new();
    let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut seen = HashSet::new();
    let declared_count;
    loop {
        let line = next_line(&bytes)?;
        let mut fields = line.split('\t');
        match fields.next() {
            Some("meta") => {
                let key = fields
                    .next()
                    .ok_or_else(|| bad("meta line without key".to_string()))?;
                let value = fields.collect::<Vec<_>>().join("\t");
                meta.push((key.to_string(), value));
            }
            Some("tensor") => {
                let name = fields
                    .next()
                    .ok_or_else(|| bad("tensor line without name".to_string()))?;
                if !seen.insert(name.to_string()) {
                    return Err(bad(format!("duplicate tensor name {name}")));
                }
                let dims = fields
                    .next()
                    .ok_or_else(|| bad(format!("tensor {name}: missing dims")))?
                    .split(' ')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("tensor {name}: bad dims")))?;
                let offset = fields
                    .next()
                    .ok_or_else(|| bad(format!("tensor {name}: missing offset")))?
                    .parse::<usize>()
                    .map_err(|_| bad(format!("tensor {name}: bad offset")))?;
                specs.push((name.to_string(), dims, offset));
            }
            Some("data") => {
                declared_count = fields
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| bad("bad data line".to_string()))?;
                break;
            }
            other => return Err(bad(format!("unexpected header line {other:?}"))),
        }
    }

    let payload = &bytes[pos..];
    if payload.len() != declared_count * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, header declares {} values",
            payload.len(),
            declared_count
        )));
    }

    let mut params = ParamSet::new();
    for (name, dims, offset) in specs {
        let numel: usize = dims.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(bad(format!("tensor {name} extends past the payload")));
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(&name, Tensor::new(dims, data));
    }
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn dense_identity_passes_input_through() {
        let mut params = ParamSet::new();
        let weight = params.add(
            "id.weight",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        );
        let bias = params.add("id.bias", Tensor::zeros(vec![2]));
        let layer = Dense {
            weight,
            bias,
            input_dim: 2,
            output_dim: 2,
            l2_factor: 0.0,
        };
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.constant(vec![1, 2], vec![1.0, 2.0]);
        assert_eq!(layer.forward(&bound, x).to_tensor().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_parameter_counts_match_closed_form() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let a = Dense::new(&mut params, &mut rng, "a", 1024, 1024, L2_FACTOR);
        let b = Dense::new(&mut params, &mut rng, "b", 2048, 1024, L2_FACTOR);
        assert_eq!(a.parameter_count(), 1_049_600);
        assert_eq!(b.parameter_count(), 2_098_176);
        assert_eq!(
            params.scalar_count(),
            a.parameter_count() + b.parameter_count()
        );
    }

    #[test]
    fn glorot_bounds_variance_and_determinism() {
        let mut rng = StdRng::seed_from_u64(9);
        let t = glorot_uniform(&mut rng, vec![1024, 1024], 1024, 1024);
        let limit = (6.0f64 / 2048.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < limit));
        // Uniform(-L, L) has variance L^2/3 = 2/(fan_in+fan_out).
        let mean: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var: f64 =
            t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.numel() as f64;
        let expected = 2.0 / 2048.0;
        assert!((var - expected).abs() < 0.2 * expected);

        let again = glorot_uniform(&mut StdRng::seed_from_u64(9), vec![1024, 1024], 1024, 1024);
        assert_eq!(t.data(), again.data());
    }

    #[test]
    fn bias_initializes_to_zero() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let layer = Dense::new(&mut params, &mut rng, "head", 10, 75, L2_FACTOR);
        assert!(params.get(layer.bias).data().iter().all(|v| *v == 0.0));
        assert_eq!(params.get(layer.bias).numel(), 75);
    }

    #[test]
    fn dropout_eval_and_rate_zero_are_identity() {
        let mut rng = StdRng::seed_from_u64(5);
        let tape = Tape::new();
        let x = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let eval = dropout(&tape, x, 0.3, Mode::Eval, &mut rng);
        assert_eq!(eval.to_tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
        let zero = dropout(&tape, x, 0.0, Mode::Train, &mut rng);
        assert_eq!(zero.to_tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn dropout_train_statistics() {
        let mut rng = StdRng::seed_from_u64(17);
        let n = 1_000_000usize;
        let tape = Tape::new();
        let x = tape.constant(vec![n], vec![1.0; n]);
        let y = dropout(&tape, x, 0.3, Mode::Train, &mut rng).to_tensor();
        let zeros = y.data().iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((0.297..=0.303).contains(&zeros), "zero fraction {zeros}");
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
        // Survivors carry exactly the inverted-dropout scale.
        let scale = 1.0 / 0.7;
        assert!(y.data().iter().all(|v| *v == 0.0 || (*v - scale).abs() < 1e-15));
    }

    #[test]
    #[should_panic(expected = "rate must be in [0, 1)")]
    fn dropout_rejects_rate_one() {
        let mut rng = StdRng::seed_from_u64(0);
        let tape = Tape::new();
        let x = tape.constant(vec![1], vec![1.0]);
        let _ = dropout(&tape, x, 1.0, Mode::Train, &mut rng);
    }

    #[test]
    fn l2_penalty_matches_hand_computation() {
        let mut params = ParamSet::new();
        let weight = params.add("w.weight", Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let bias = params.add("w.bias", Tensor::new(vec![2], vec![100.0, 100.0]));
        let layer = Dense {
            weight,
            bias,
            input_dim: 1,
            output_dim: 2,
            l2_factor: 0.0005,
        };
        let tape = Tape::new();
        let bound = params.bind(&tape);
        // 0.0005 * (1 + 4); the huge biases must not contribute.
        let p = l2_penalty(&bound, &[layer]).item();
        assert!((p - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(vec![2], vec![1.5, -0.5]));
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let other = tape.leaf(&Tensor::new(vec![1], vec![3.0]).with_grad());
        let grads = tape.backward(other.mul(other).sum());
        let mut adam = Adam::new(0.001);
        adam.step(&mut params, &bound, &grads).unwrap();
        assert_eq!(params.get(id).data(), &[1.5, -0.5]);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // m-hat = g, v-hat = g^2, so the first update is -lr * g / (|g| + eps).
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(0.0));
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let grads = tape.backward(bound.value(id).scale(0.1).sum());
        let mut adam = Adam::new(0.001);
        adam.step(&mut params, &bound, &grads).unwrap();
        let expected = -0.001 * 0.1 / (0.1 + 1e-8);
        assert!((params.get(id).data()[0] - expected).abs() < 1e-15);
        assert!((params.get(id).data()[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(w) = (w - 3)^2 from w = 0 with lr 0.05.
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(0.05);
        let mut gaps = Vec::new();
        for _ in 0..100 {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let w = bound.value(id);
            let shifted = w.add(tape.constant(vec![1], vec![-3.0]));
            let grads = tape.backward(shifted.mul(shifted).sum());
            adam.step(&mut params, &bound, &grads).unwrap();
            gaps.push((params.get(id).data()[0] - 3.0).abs());
        }
        assert!(gaps.last().unwrap() < &0.5);
        // Monotone after burn-in.
        assert!(gaps.windows(2).skip(10).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn adam_rejects_non_finite_gradients_naming_the_parameter() {
        let mut params = ParamSet::new();
        let id = params.add("heads.attr.weight", Tensor::scalar(2.0));
        let tape = Tape::new();
        let bound = params.bind(&tape);
        // log of a negative-clamped value is fine; manufacture inf via overflow.
        let huge = tape.constant(vec![1], vec![1e308]);
        let loss = bound.value(id).mul(huge).mul(huge).sum();
        let grads = tape.backward(loss);
        let mut adam = Adam::new(0.001);
        let err = adam.step(&mut params, &bound, &grads).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("heads.attr.weight"), "message was {msg}");
        assert_eq!(params.get(id).data(), &[2.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(33);
        let mut params = ParamSet::new();
        Dense::new(&mut params, &mut rng, "proj", 7, 5, L2_FACTOR);
        Dense::new(&mut params, &mut rng, "head", 5, 3, L2_FACTOR);
        // Interesting bit patterns survive the trip too.
        params.add(
            "extras",
            Tensor::new(vec![4], vec![f64::MIN_POSITIVE, -0.0, 1e-310, 1.0 / 3.0]),
        );
        let meta = vec![
            ("variant".to_string(), "final".to_string()),
            ("note".to_string(), "with spaces and\ttabs".to_string()),
        ];

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &meta, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.params.len(), params.len());
        for (a, b) in params.ids().zip(loaded.params.ids()) {
            assert_eq!(params.name(a), loaded.params.name(b));
            assert_eq!(params.get(a).shape(), loaded.params.get(b).shape());
            let before: Vec<u64> = params.get(a).data().iter().map(|v| v.to_bits()).collect();
            let after: Vec<u64> = loaded.params.get(b).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(before, after);
        }

        // Saving the loaded set again produces identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded.meta, &loaded.params).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint\n").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));

        std::fs::write(&path, b"CKPT v1\ndata\t9\n\x00\x01").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("payload"));
    }
}
