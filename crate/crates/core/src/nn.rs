//! Dense feed-forward networks with hand-written backpropagation, Adam, and
//! Polyak averaging. Batches are stored column-wise: one sample per column.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input has {got} rows, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("networks have different shapes")]
    ShapeMismatch,
    #[error("soft-update factor {0} is outside (0, 1]")]
    TauOutOfRange(f64),
    #[error("corrupt parameter data: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    /// `scale ⊙ tanh(z)`, one scale per output.
    TanhScaled(Vec<f64>),
}

/// ReLU hidden layers followed by the chosen output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    output: OutputActivation,
}

/// Per-layer values kept by [`Mlp::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of the last layer.
    last_pre: DMatrix<f64>,
}

/// Parameter-shaped container used for gradients and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Params {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend_from_slice(w.as_slice());
            v.extend_from_slice(b.as_slice());
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|x| *x == 0.0)
    }
}

impl Mlp {
    /// Fan-in uniform initialization `U(−1/√fan_in, 1/√fan_in)`; the last
    /// layer is further multiplied by `last_layer_scale`.
    pub fn new<R: Rng>(
        sizes: &[usize],
        output: OutputActivation,
        last_layer_scale: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        assert!(sizes.iter().all(|s| *s > 0), "layer sizes must be positive");
        if let OutputActivation::TanhScaled(s) = &output {
            assert_eq!(s.len(), *sizes.last().expect("nonempty"));
        }
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let scale = if l + 1 == layers { last_layer_scale } else { 1.0 };
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-bound..bound) * scale
            }));
            biases.push(DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound) * scale));
        }
        Self {
            weights,
            biases,
            output,
        }
    }

    /// Builds a network from explicit parameters.
    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        output: OutputActivation,
    ) -> Result<Self, NnError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NnError::ShapeMismatch);
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != b.len() || w.nrows() == 0 || w.ncols() == 0 {
                return Err(NnError::ShapeMismatch);
            }
            if l > 0 && weights[l - 1].nrows() != w.ncols() {
                return Err(NnError::ShapeMismatch);
            }
        }
        if let OutputActivation::TanhScaled(s) = &output {
            if s.len() != weights.last().expect("nonempty").nrows() {
                return Err(NnError::ShapeMismatch);
            }
        }
        Ok(Self {
            weights,
            biases,
            output,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].ncols()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("nonempty").nrows()
    }

    pub fn output_activation(&self) -> &OutputActivation {
        &self.output
    }

    pub fn params(&self) -> Params {
        Params {
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        }
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().flat()
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|x| x.is_finite())
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<(), NnError> {
        if x.nrows() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.nrows(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights[l] * x;
        let b = &self.biases[l];
        for mut col in z.column_iter_mut() {
            col += b;
        }
        z
    }

    fn activate_output(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.output {
            OutputActivation::Identity => z.clone(),
            OutputActivation::TanhScaled(s) => {
                DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| s[i] * z[(i, j)].tanh())
            }
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NnError> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for l in 0..last {
            h = self.affine(l, &h).map(|v| v.max(0.0));
        }
        Ok(self.activate_output(&self.affine(last, &h)))
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache), NnError> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        inputs.push(x.clone());
        for l in 0..last {
            let h = self.affine(l, &inputs[l]).map(|v| v.max(0.0));
            inputs.push(h);
        }
        let last_pre = self.affine(last, &inputs[last]);
        let out = self.activate_output(&last_pre);
        Ok((out, ForwardCache { inputs, last_pre }))
    }

    /// Reverse-mode gradients of `Σ grad_out ⊙ output` with respect to the
    /// parameters and the input. Gradients are summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> (Params, DMatrix<f64>) {
        let layers = self.weights.len();
        let mut delta = match &self.output {
            OutputActivation::Identity => grad_out.clone(),
            OutputActivation::TanhScaled(s) => DMatrix::from_fn(grad_out.nrows(), grad_out.ncols(), |i, j| {
                let t = cache.last_pre[(i, j)].tanh();
                grad_out[(i, j)] * s[i] * (1.0 - t * t)
            }),
        };
        let mut weights = vec![DMatrix::zeros(0, 0); layers];
        let mut biases = vec![DVector::zeros(0); layers];
        for l in (0..layers).rev() {
            let input = &cache.inputs[l];
            weights[l] = &delta * input.transpose();
            biases[l] = delta.column_sum();
            let mut back = self.weights[l].transpose() * &delta;
            if l > 0 {
                // ReLU derivative, taken as 0 at the kink
                back.zip_apply(input, |g, h| {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = back;
        }
        (Params { weights, biases }, delta)
    }

    /// `θ ← θ + step`.
    pub fn apply_delta(&mut self, step: &Params) {
        for (w, d) in self.weights.iter_mut().zip(&step.weights) {
            *w += d;
        }
        for (b, d) in self.biases.iter_mut().zip(&step.biases) {
            *b += d;
        }
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// `target ← τ online + (1 − τ) target`, evaluated as `t + τ(o − t)` so that
/// equal networks are a bitwise fixed point.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NnError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NnError::TauOutOfRange(tau));
    }
    if !target.same_shape(online) {
        return Err(NnError::ShapeMismatch);
    }
    if tau == 1.0 {
        target.weights.clone_from(&online.weights);
        target.biases.clone_from(&online.biases);
        return Ok(());
    }
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        t.zip_apply(o, |a, b| *a += tau * (b - *a));
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        t.zip_apply(o, |a, b| *a += tau * (b - *a));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(config: AdamConfig, net: &Mlp) -> Self {
        Self {
            config,
            step: 0,
            m: Params::zeros_like(net),
            v: Params::zeros_like(net),
        }
    }

    /// One descent step on `net` along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Params) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        };
        for l in 0..net.weights.len() {
            update(
                net.weights[l].as_mut_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
                grads.weights[l].as_slice(),
            );
            update(
                net.biases[l].as_mut_slice(),
                self.m.biases[l].as_mut_slice(),
                self.v.biases[l].as_mut_slice(),
                grads.biases[l].as_slice(),
            );
        }
    }
}

/// Little-endian binary encoding used by checkpoints.
pub mod codec {
    use super::*;

    pub fn put_u32(out: &mut Vec<u8>, v: u32) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(out: &mut Vec<u8>, v: u64) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(out: &mut Vec<u8>, v: f64) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
        put_u64(out, v.len() as u64);
        for x in v {
            put_f64(out, *x);
        }
    }

    /// Bounds-checked cursor over a byte slice.
    pub struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(bytes: &'a [u8]) -> Self {
            Self { bytes, pos: 0 }
        }

        pub fn remaining(&self) -> usize {
            self.bytes.len() - self.pos
        }

        pub fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
            if self.remaining() < n {
                return Err(NnError::Corrupt(format!(
                    "unexpected end of data at byte {} (wanted {n})",
                    self.pos
                )));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        pub fn u32(&mut self) -> Result<u32, NnError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        pub fn u64(&mut self) -> Result<u64, NnError> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }

        pub fn f64(&mut self) -> Result<f64, NnError> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }

        /// Length-prefixed sequence; the length is checked against the
        /// remaining bytes before allocating.
        pub fn f64s(&mut self) -> Result<Vec<f64>, NnError> {
            let n = self.len_prefix(8)?;
            (0..n).map(|_| self.f64()).collect()
        }

        pub fn len_prefix(&mut self, item_bytes: usize) -> Result<usize, NnError> {
            let n = self.u64()?;
            let n = usize::try_from(n).map_err(|_| NnError::Corrupt("length overflow".into()))?;
            if n.checked_mul(item_bytes).is_none_or(|b| b > self.remaining()) {
                return Err(NnError::Corrupt(format!("length {n} exceeds remaining data")));
            }
            Ok(n)
        }
    }

    fn put_params(out: &mut Vec<u8>, p: &Params) {
        put_u32(out, p.weights.len() as u32);
        for (w, b) in p.weights.iter().zip(&p.biases) {
            put_u32(out, w.nrows() as u32);
            put_u32(out, w.ncols() as u32);
            put_f64s(out, w.as_slice());
            put_f64s(out, b.as_slice());
        }
    }

    fn read_params(r: &mut Reader) -> Result<Params, NnError> {
        let layers = r.u32()? as usize;
        if layers == 0 || layers > 64 {
            return Err(NnError::Corrupt(format!("implausible layer count {layers}")));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for _ in 0..layers {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let w = r.f64s()?;
            let b = r.f64s()?;
            if rows.checked_mul(cols) != Some(w.len()) || b.len() != rows {
                return Err(NnError::Corrupt("layer shape does not match data".into()));
            }
            weights.push(DMatrix::from_vec(rows, cols, w));
            biases.push(DVector::from_vec(b));
        }
        Ok(Params { weights, biases })
    }

    pub fn put_mlp(out: &mut Vec<u8>, net: &Mlp) {
        match &net.output {
            OutputActivation::Identity => put_u32(out, 0),
            OutputActivation::TanhScaled(s) => {
                put_u32(out, 1);
                put_f64s(out, s);
            }
        }
        put_params(out, &net.params());
    }

    pub fn read_mlp(r: &mut Reader) -> Result<Mlp, NnError> {
        let output = match r.u32()? {
            0 => OutputActivation::Identity,
            1 => OutputActivation::TanhScaled(r.f64s()?),
            t => return Err(NnError::Corrupt(format!("unknown output activation tag {t}"))),
        };
        let p = read_params(r)?;
        Mlp::from_parts(p.weights, p.biases, output).map_err(|e| NnError::Corrupt(e.to_string()))
    }

    pub fn put_adam(out: &mut Vec<u8>, opt: &Adam) {
        put_f64(out, opt.config.learning_rate);
        put_f64(out, opt.config.beta1);
        put_f64(out, opt.config.beta2);
        put_f64(out, opt.config.epsilon);
        put_u64(out, opt.step);
        put_params(out, &opt.m);
        put_params(out, &opt.v);
    }

    pub fn read_adam(r: &mut Reader, net: &Mlp) -> Result<Adam, NnError> {
        let config = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
        };
        let step = r.u64()?;
        let m = read_params(r)?;
        let v = read_params(r)?;
        let shape = Params::zeros_like(net);
        let same = |p: &Params| {
            p.weights.len() == shape.weights.len()
                && p.weights.iter().zip(&shape.weights).all(|(a, b)| a.shape() == b.shape())
        };
        if !same(&m) || !same(&v) {
            return Err(NnError::Corrupt("optimizer moments do not match network".into()));
        }
        Ok(Adam { config, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let net = Mlp::from_parts(
            vec![DMatrix::zeros(3, 2), DMatrix::zeros(2, 3)],
            vec![DVector::from_element(3, 1.0), DVector::from_vec(vec![0.5, -0.25])],
            OutputActivation::Identity,
        )
        .unwrap();
        let out = net.forward(&DMatrix::from_element(2, 4, 7.0)).unwrap();
        for j in 0..4 {
            assert_eq!(out[(0, j)], 0.5);
            assert_eq!(out[(1, j)], -0.25);
        }
    }

    #[test]
    fn identity_layer_reproduces_input() {
        let net = Mlp::from_parts(vec![DMatrix::identity(3, 3)], vec![DVector::zeros(3)], OutputActivation::Identity)
            .unwrap();
        let x = DMatrix::from_vec(3, 2, vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn wrong_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[4, 8, 1], OutputActivation::Identity, 1.0, &mut rng);
        assert_eq!(
            net.forward(&DMatrix::zeros(3, 1)),
            Err(NnError::DimensionMismatch { expected: 4, got: 3 })
        );
    }

    #[test]
    fn affine_input_gradient_is_transpose() {
        let w = DMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let net = Mlp::from_parts(vec![w.clone()], vec![DVector::zeros(2)], OutputActivation::Identity).unwrap();
        let (_, cache) = net.forward_cached(&DMatrix::from_element(3, 1, 0.3)).unwrap();
        let g = DMatrix::from_vec(2, 1, vec![0.7, -1.1]);
        let (_, dx) = net.backward(&cache, &g);
        assert_eq!(dx, w.transpose() * g);
    }

    #[test]
    fn zero_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 5, 2], OutputActivation::TanhScaled(vec![0.1, 0.2]), 0.1, &mut rng);
        let (_, cache) = net.forward_cached(&DMatrix::from_element(3, 2, 0.4)).unwrap();
        let (p, dx) = net.backward(&cache, &DMatrix::zeros(2, 2));
        assert!(p.is_zero());
        assert!(dx.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn soft_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let online = Mlp::new(&[2, 4, 1], OutputActivation::Identity, 1.0, &mut rng);
        let mut target = Mlp::new(&[2, 4, 1], OutputActivation::Identity, 1.0, &mut rng);
        let mut copy = online.clone();
        soft_update(&mut copy, &online, 0.005).unwrap();
        assert_eq!(copy, online);
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
        assert_eq!(soft_update(&mut target, &online, 0.0), Err(NnError::TauOutOfRange(0.0)));
        assert_eq!(soft_update(&mut target, &online, 1.5), Err(NnError::TauOutOfRange(1.5)));
        let other = Mlp::new(&[2, 3, 1], OutputActivation::Identity, 1.0, &mut rng);
        assert_eq!(soft_update(&mut target, &other, 0.5), Err(NnError::ShapeMismatch));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[2, 3, 1], OutputActivation::Identity, 1.0, &mut rng);
        let before = net.clone();
        let mut opt = Adam::new(AdamConfig::with_learning_rate(1e-2), &net);
        let zero = Params::zeros_like(&net);
        opt.step(&mut net, &zero);
        assert_eq!(net, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn codec_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(&[3, 4, 2], OutputActivation::TanhScaled(vec![0.1, 0.3]), 0.1, &mut rng);
        let mut opt = Adam::new(AdamConfig::with_learning_rate(1e-3), &net);
        let (_, cache) = net.forward_cached(&DMatrix::from_element(3, 1, 1.0)).unwrap();
        let (g, _) = net.backward(&cache, &DMatrix::from_element(2, 1, 1.0));
        opt.step(&mut net, &g);
        let mut bytes = Vec::new();
        codec::put_mlp(&mut bytes, &net);
        codec::put_adam(&mut bytes, &opt);
        let mut r = codec::Reader::new(&bytes);
        let net2 = codec::read_mlp(&mut r).unwrap();
        let opt2 = codec::read_adam(&mut r, &net2).unwrap();
        assert_eq!(r.remaining(), 0);
        assert_eq!(net2, net);
        assert_eq!(opt2, opt);
        for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
            let mut r = codec::Reader::new(&bytes[..cut]);
            let res = codec::read_mlp(&mut r).and_then(|n| codec::read_adam(&mut r, &n));
            assert!(matches!(res, Err(NnError::Corrupt(_))));
        }
    }
}
