use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{softmax_rows, BatchStats, Graph, Var, PROB_FLOOR};
use super::tensor::Tensor;
use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::geo::FEATURE_DIM;
use crate::scalar::Scalar;

/// Initial decoder hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecoderInit {
    #[default]
    Context,
    Zero,
}

impl std::str::FromStr for DecoderInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(DecoderInit::Context),
            "zero" => Ok(DecoderInit::Zero),
            _ => Err(Error::InvalidConfig(format!("decoder_h0 must be context or zero, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub fc_hidden: usize,
    pub num_beams: usize,
    /// Observation window `W`.
    pub window: usize,
    /// Prediction horizon `V`; the model emits `V + 1` score rows.
    pub horizon: usize,
    pub decoder_h0: DecoderInit,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: FEATURE_DIM,
            conv_channels: 128,
            kernel: 3,
            hidden: 128,
            fc_hidden: 64,
            num_beams: 32,
            window: 8,
            horizon: 3,
            decoder_h0: DecoderInit::Context,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.conv_channels,
            self.hidden,
            self.fc_hidden,
            self.window,
        ];
        if dims.contains(&0) || self.num_beams < 2 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig("conv kernel must be odd for same padding".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig("bad batch-norm eps or momentum".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.horizon + 1
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Parameter names, shapes and trainability in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>, bool)> {
        let (c, k, h, i) = (self.conv_channels, self.kernel, self.hidden, self.input_dim);
        let gru = |pre: &'static [&'static str; 4], input: usize| {
            vec![
                (pre[0], vec![3 * h, input], true),
                (pre[1], vec![3 * h, h], true),
                (pre[2], vec![3 * h], true),
                (pre[3], vec![3 * h], true),
            ]
        };
        let mut out = vec![
            ("conv1.weight", vec![c, i, k], true),
            ("conv1.bias", vec![c], true),
            ("conv2.weight", vec![c, c, k], true),
            ("conv2.bias", vec![c], true),
            ("bn.weight", vec![c], true),
            ("bn.bias", vec![c], true),
            ("bn.running_mean", vec![c], false),
            ("bn.running_var", vec![c], false),
        ];
        out.extend(gru(
            &["encoder.weight_ih", "encoder.weight_hh", "encoder.bias_ih", "encoder.bias_hh"],
            c,
        ));
        out.extend(gru(
            &["decoder.weight_ih", "decoder.weight_hh", "decoder.bias_ih", "decoder.bias_hh"],
            h,
        ));
        out.extend([
            ("fc1.weight", vec![self.fc_hidden, h], true),
            ("fc1.bias", vec![self.fc_hidden], true),
            ("fc2.weight", vec![self.num_beams, self.fc_hidden], true),
            ("fc2.bias", vec![self.num_beams], true),
        ]);
        out
    }
}

// indices into the layout
const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const BN_W: usize = 4;
const BN_B: usize = 5;
const BN_MEAN: usize = 6;
const BN_VAR: usize = 7;
const ENC: usize = 8;
const DEC: usize = 12;
const FC1_W: usize = 16;
const FC1_B: usize = 17;
const FC2_W: usize = 18;
const FC2_B: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

/// Every tensor of the network, including batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<&'static str>,
    trainable: Vec<bool>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Zero-filled parameters (running variance 1).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut tensors: Vec<Tensor<T>> = layout.iter().map(|(_, s, _)| Tensor::zeros(s.clone())).collect();
        tensors[BN_VAR] = Tensor::filled(vec![config.conv_channels], T::one());
        Ok(ModelParams {
            names: layout.iter().map(|(n, _, _)| *n).collect(),
            trainable: layout.iter().map(|(_, _, t)| *t).collect(),
            tensors,
            config,
        })
    }

    /// Seeded initialization: weights and biases uniform in `±1/sqrt(fan_in)`
    /// (the hidden size for GRUs), batch-norm scale 1 and shift 0. Values
    /// are drawn in 64-bit and cast, so both precisions start identically.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &p.config;
        let conv1 = 1.0 / ((c.input_dim * c.kernel) as f64).sqrt();
        let conv2 = 1.0 / ((c.conv_channels * c.kernel) as f64).sqrt();
        let gru = 1.0 / (c.hidden as f64).sqrt();
        let fc1 = 1.0 / (c.hidden as f64).sqrt();
        let fc2 = 1.0 / (c.fc_hidden as f64).sqrt();
        let mut bounds = vec![0.0; p.tensors.len()];
        bounds[CONV1_W] = conv1;
        bounds[CONV1_B] = conv1;
        bounds[CONV2_W] = conv2;
        bounds[CONV2_B] = conv2;
        for i in ENC..DEC + 4 {
            bounds[i] = gru;
        }
        bounds[FC1_W] = fc1;
        bounds[FC1_B] = fc1;
        bounds[FC2_W] = fc2;
        bounds[FC2_B] = fc2;
        for (t, &b) in p.tensors.iter_mut().zip(&bounds) {
            if b > 0.0 {
                for v in t.data_mut() {
                    *v = T::lit(rng.random_range(-b..b));
                }
            }
        }
        p.tensors[BN_W] = Tensor::filled(vec![p.config.conv_channels], T::one());
        Ok(p)
    }

    /// Rebuild from named tensors in layout order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if tensors.len() != p.tensors.len() {
            return Err(Error::shape("model params", p.tensors.len(), tensors.len()));
        }
        for (i, t) in tensors.into_iter().enumerate() {
            if t.shape() != p.tensors[i].shape() {
                return Err(Error::shape(
                    "model params",
                    format!("{} {:?}", p.names[i], p.tensors[i].shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            p.tensors[i] = t;
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(name, tensor, trainable)` in storage order.
    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), tr)| (*n, t, *tr))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| *n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter().zip(&self.trainable).filter(|(_, t)| **t).map(|(x, _)| x)
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors
            .iter_mut()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(x, _)| x)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            trainable: self.trainable.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Record the forward pass for a `[B, W, input_dim]` batch. With
    /// `labels` (`labels[v][b]`), the output carries the summed per-step
    /// batch-mean cross-entropy. `record` enables gradients.
    pub fn forward(
        &self,
        input: &Tensor<T>,
        labels: Option<&[Vec<usize>]>,
        mode: Mode,
        record: bool,
    ) -> Result<Forward<T>> {
        let c = &self.config;
        let s = input.shape();
        if s.len() != 3 || s[1] != c.window || s[2] != c.input_dim || s[0] == 0 {
            return Err(Error::shape(
                "forward",
                format!("[B > 0, {}, {}]", c.window, c.input_dim),
                format!("{s:?}"),
            ));
        }
        let batch = s[0];
        if let Some(l) = labels {
            if l.len() != c.steps() || l.iter().any(|row| row.len() != batch) {
                return Err(Error::shape("forward", format!("{} label rows of {batch}", c.steps()), l.len()));
            }
        }
        let mut g = if record { Graph::new() } else { Graph::inference() };
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| if tr { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let x = g.constant(input.clone());

        let y = g.conv1d(x, vars[CONV1_W], vars[CONV1_B], c.pad())?;
        let y = g.conv1d(y, vars[CONV2_W], vars[CONV2_B], c.pad())?;
        let eps = T::lit(c.bn_eps);
        let (y, bn_stats) = match mode {
            Mode::Train => {
                let (y, st) = g.batch_norm_train(y, vars[BN_W], vars[BN_B], eps)?;
                (y, Some(st))
            }
            Mode::Eval => {
                let y = g.batch_norm_eval(
                    y,
                    vars[BN_W],
                    vars[BN_B],
                    self.tensors[BN_MEAN].data(),
                    self.tensors[BN_VAR].data(),
                    eps,
                )?;
                (y, None)
            }
        };
        let y = g.relu(y)?;

        let zeros = g.constant(Tensor::zeros(vec![batch, c.hidden]));
        let mut h = zeros;
        for t in 0..c.window {
            let xt = g.time_step(y, t)?;
            h = g.gru_cell(xt, h, vars[ENC], vars[ENC + 1], vars[ENC + 2], vars[ENC + 3])?;
        }
        let context = h;
        let mut h = match c.decoder_h0 {
            DecoderInit::Context => context,
            DecoderInit::Zero => zeros,
        };
        let mut logits = Vec::with_capacity(c.steps());
        let mut loss: Option<Var> = None;
        for v in 0..c.steps() {
            h = g.gru_cell(context, h, vars[DEC], vars[DEC + 1], vars[DEC + 2], vars[DEC + 3])?;
            let a = g.linear(h, vars[FC1_W], vars[FC1_B])?;
            let a = g.relu(a)?;
            let out = g.linear(a, vars[FC2_W], vars[FC2_B])?;
            logits.push(out);
            if let Some(l) = labels {
                let step = g.softmax_cross_entropy(out, &l[v])?;
                loss = Some(match loss {
                    None => step,
                    Some(prev) => g.add(prev, step)?,
                });
            }
        }
        Ok(Forward {
            graph: g,
            vars,
            trainable: self.trainable.clone(),
            logits,
            loss,
            bn_stats,
            batch,
            num_beams: c.num_beams,
        })
    }

    /// Exponential moving update of the batch-norm buffers.
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(self.config.bn_momentum);
        let keep = T::one() - m;
        for (r, s) in self.tensors[BN_MEAN].data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * *s;
        }
        for (r, s) in self.tensors[BN_VAR].data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * *s;
        }
    }

    /// Eval-mode scores for a batch of windows.
    pub fn predict(&self, windows: &[&WindowedSample]) -> Result<Vec<ScoreSequence<T>>> {
        let input = batch_input(windows, self.config.window)?;
        self.forward(&input, None, Mode::Eval, false)?.scores()
    }
}

/// A recorded forward pass.
pub struct Forward<T: Scalar> {
    graph: Graph<T>,
    vars: Vec<Var>,
    trainable: Vec<bool>,
    logits: Vec<Var>,
    loss: Option<Var>,
    bn_stats: Option<BatchStats<T>>,
    batch: usize,
    num_beams: usize,
}

impl<T: Scalar> Forward<T> {
    pub fn loss(&self) -> Option<T> {
        self.loss.map(|l| self.graph.value(l).item())
    }

    /// Train-mode batch statistics of the batch-norm layer.
    pub fn bn_stats(&self) -> Option<&BatchStats<T>> {
        self.bn_stats.as_ref()
    }

    /// Logits of step `v`, `[B, M]`.
    pub fn logits(&self, v: usize) -> &Tensor<T> {
        self.graph.value(self.logits[v])
    }

    /// Per-sample score sequences.
    pub fn scores(&self) -> Result<Vec<ScoreSequence<T>>> {
        let m = self.num_beams;
        let steps = self.logits.len();
        let probs: Vec<Vec<T>> = self
            .logits
            .iter()
            .map(|l| softmax_rows(self.graph.value(*l).data(), m))
            .collect();
        let floor = T::lit(PROB_FLOOR);
        (0..self.batch)
            .map(|b| {
                let mut data = Vec::with_capacity(steps * m);
                for p in &probs {
                    data.extend(p[b * m..(b + 1) * m].iter().map(|v| v.max(floor)));
                }
                ScoreSequence::new(steps, m, data)
            })
            .collect()
    }

    /// Gradients of the loss for each trainable tensor, in layout order.
    pub fn backward(&mut self) -> Result<Vec<Vec<T>>> {
        let loss = self
            .loss
            .ok_or_else(|| Error::InvalidConfig("backward needs a forward pass with labels".into()))?;
        self.graph.backward(loss)?;
        let mut out = Vec::new();
        for (v, tr) in self.vars.clone().into_iter().zip(self.trainable.clone()) {
            if tr {
                let n = self.graph.value(v).len();
                out.push(self.graph.take_grad(v).unwrap_or_else(|| vec![T::zero(); n]));
            }
        }
        Ok(out)
    }
}

/// Stack windows into a `[B, W, 5]` tensor.
pub fn batch_input<T: Scalar>(windows: &[&WindowedSample], window: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(windows.len() * window * FEATURE_DIM);
    for w in windows {
        if w.features().len() != window {
            return Err(Error::shape("batch_input", window, w.features().len()));
        }
        for f in w.features() {
            data.extend(f.0.iter().map(|v| T::lit(*v)));
        }
    }
    Tensor::new(vec![windows.len(), window, FEATURE_DIM], data)
}

/// Labels transposed to `[step][batch]`.
pub fn batch_labels(windows: &[&WindowedSample], steps: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::with_capacity(windows.len()); steps];
    for w in windows {
        if w.labels().len() != steps {
            return Err(Error::shape("batch_labels", steps, w.labels().len()));
        }
        for (row, l) in out.iter_mut().zip(w.labels()) {
            row.push(*l);
        }
    }
    Ok(out)
}

/// `(V+1) x M` row-stochastic score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSequence<T> {
    steps: usize,
    num_beams: usize,
    data: Vec<T>,
}

impl<T: Scalar> ScoreSequence<T> {
    /// Rows must be probability vectors: entries in (0, 1], sums within 1e-6 of 1.
    pub fn new(steps: usize, num_beams: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != steps * num_beams || num_beams == 0 {
            return Err(Error::shape("score sequence", steps * num_beams, data.len()));
        }
        for row in data.chunks_exact(num_beams) {
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            let tol = if T::BYTES == 4 { 1e-5 } else { 1e-6 };
            if (sum - 1.0).abs() > tol || row.iter().any(|v| !(*v > T::zero() && *v <= T::one())) {
                return Err(Error::InvalidData(format!("score row is not a probability vector (sum {sum})")));
            }
        }
        Ok(ScoreSequence {
            steps,
            num_beams,
            data,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_beams(&self) -> usize {
        self.num_beams
    }

    pub fn row(&self, v: usize) -> &[T] {
        &self.data[v * self.num_beams..(v + 1) * self.num_beams]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.num_beams)
    }

    /// Per-step argmax, ties to the lowest index.
    pub fn decode(&self) -> Vec<usize> {
        self.rows().map(crate::argmax).collect()
    }

    /// Summed over steps `-ln(max(score at label, 1e-12))`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<T> {
        if labels.len() != self.steps {
            return Err(Error::shape("cross_entropy", self.steps, labels.len()));
        }
        let floor = T::lit(PROB_FLOOR);
        let mut total = T::zero();
        for (row, &l) in self.rows().zip(labels) {
            if l >= self.num_beams {
                return Err(Error::shape("cross_entropy", format!("label < {}", self.num_beams), l));
            }
            total -= row[l].max(floor).ln();
        }
        Ok(total)
    }
}

/// Trainable scalar count and its 32-bit storage size in bytes.
pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> (usize, usize) {
    let n = params.trainable().map(|t| t.len()).sum::<usize>();
    (n, n * 4)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            conv_channels: 6,
            hidden: 9,
            fc_hidden: 16,
            num_beams: 7,
            window: 4,
            horizon: 2,
            ..ModelConfig::default()
        }
    }

    fn random_input(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![b, cfg.window, cfg.input_dim], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_parameter_count() {
        let p = ModelParams::<f32>::zeros(ModelConfig::default()).unwrap();
        let (n, bytes) = count_params(&p);
        assert_eq!(n, 2048 + 49280 + 256 + 99072 + 99072 + 8256 + 2080);
        assert_eq!(n, 260_064);
        assert_eq!(bytes, 1_040_256);
        // all tensors including the two running-stat buffers
        let all: usize = p.named().map(|(_, t, _)| t.len()).sum();
        assert_eq!(all, 260_064 + 256);
    }

    #[test]
    fn layer_shapes() {
        let p = ModelParams::<f64>::zeros(ModelConfig::default()).unwrap();
        assert_eq!(p.get("conv1.weight").unwrap().shape(), &[128, 5, 3]);
        assert_eq!(p.get("conv2.weight").unwrap().shape(), &[128, 128, 3]);
        assert_eq!(p.get("encoder.weight_ih").unwrap().shape(), &[384, 128]);
        assert_eq!(p.get("decoder.bias_hh").unwrap().shape(), &[384]);
        assert_eq!(p.get("fc1.weight").unwrap().shape(), &[64, 128]);
        assert_eq!(p.get("fc2.weight").unwrap().shape(), &[32, 64]);
    }

    #[test]
    fn output_rows_are_probabilities() {
        let cfg = small();
        let p = ModelParams::<f64>::init(cfg.clone(), 3).unwrap();
        let x = random_input(5, &cfg, 1);
        for mode in [Mode::Train, Mode::Eval] {
            let scores = p.forward(&x, None, mode, false).unwrap().scores().unwrap();
            assert_eq!(scores.len(), 5);
            for s in &scores {
                assert_eq!(s.steps(), 3);
                for row in s.rows() {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_pure_and_batch_invariant() {
        let cfg = small();
        let p = ModelParams::<f64>::init(cfg.clone(), 4).unwrap();
        let x = random_input(4, &cfg, 2);
        let a = p.forward(&x, None, Mode::Eval, false).unwrap().scores().unwrap();
        let b = p.forward(&x, None, Mode::Eval, false).unwrap().scores().unwrap();
        assert_eq!(a, b);
        // first sample alone
        let one = Tensor::new(
            vec![1, cfg.window, cfg.input_dim],
            x.data()[..cfg.window * cfg.input_dim].to_vec(),
        )
        .unwrap();
        let c = p.forward(&one, None, Mode::Eval, false).unwrap().scores().unwrap();
        for (u, v) in c[0].rows().zip(a[0].rows()) {
            for (s, t) in u.iter().zip(v) {
                assert!((s - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_equals_mean_of_per_sample_cross_entropy() {
        let cfg = small();
        let p = ModelParams::<f64>::init(cfg.clone(), 5).unwrap();
        let x = random_input(3, &cfg, 3);
        let labels = vec![vec![0, 6, 2], vec![1, 1, 1], vec![5, 3, 0]];
        let f = p.forward(&x, Some(&labels), Mode::Train, false).unwrap();
        let scores = f.scores().unwrap();
        let mut mean = 0.0;
        for (b, s) in scores.iter().enumerate() {
            let l: Vec<usize> = labels.iter().map(|row| row[b]).collect();
            mean += s.cross_entropy(&l).unwrap() / 3.0;
        }
        assert!((f.loss().unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn decode_and_cross_entropy_examples() {
        let mut one_hot = vec![1e-12; 8];
        one_hot[2] = 1.0 - 3.0 * 1e-12;
        one_hot[4 + 1] = 1.0 - 3.0 * 1e-12;
        one_hot[4] = 1e-12;
        one_hot[6] = 1e-12;
        one_hot[7] = 1e-12;
        let s = ScoreSequence::new(2, 4, one_hot).unwrap();
        assert_eq!(s.decode(), vec![2, 1]);
        assert!(s.cross_entropy(&[2, 1]).unwrap() < 1e-11);

        let uniform = ScoreSequence::<f64>::new(4, 32, vec![1.0 / 32.0; 128]).unwrap();
        assert_eq!(uniform.decode(), vec![0; 4]);
        let ce = uniform.cross_entropy(&[0, 5, 31, 9]).unwrap();
        assert!((ce - 13.862943611198906).abs() < 1e-12);
    }

    #[test]
    fn decoder_init_changes_output() {
        let cfg = small();
        let x = random_input(2, &cfg, 9);
        let a = ModelParams::<f64>::init(cfg.clone(), 1).unwrap();
        let b = ModelParams::<f64>::init(ModelConfig { decoder_h0: DecoderInit::Zero, ..cfg.clone() }, 1).unwrap();
        let sa = a.forward(&x, None, Mode::Eval, false).unwrap().scores().unwrap();
        let sb = b.forward(&x, None, Mode::Eval, false).unwrap().scores().unwrap();
        assert_ne!(sa, sb);
    }

    #[test]
    fn init_is_seeded_and_precision_independent() {
        let a = ModelParams::<f64>::init(small(), 11).unwrap();
        let b = ModelParams::<f64>::init(small(), 11).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(small(), 11).unwrap();
        assert_eq!(a.cast::<f32>(), c);
        assert_ne!(a, ModelParams::<f64>::init(small(), 12).unwrap());
    }

    #[test]
    fn gradcheck_full_model() {
        for decoder_h0 in [DecoderInit::Context, DecoderInit::Zero] {
            let cfg = ModelConfig { decoder_h0, ..small() };
            let p = ModelParams::<f64>::init(cfg.clone(), 21).unwrap();
            let x = random_input(3, &cfg, 22);
            let labels = vec![vec![0, 6, 2], vec![1, 1, 4], vec![5, 3, 0]];
            let grads = p.forward(&x, Some(&labels), Mode::Train, true).unwrap().backward().unwrap();
            let loss_at = |q: &ModelParams<f64>| {
                q.forward(&x, Some(&labels), Mode::Train, false).unwrap().loss().unwrap()
            };
            let names: Vec<&str> = p.named().filter(|(_, _, tr)| *tr).map(|(n, _, _)| n).collect();
            assert_eq!(names.len(), grads.len());
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let h = 1e-5;
            for (name, grad) in names.iter().zip(&grads) {
                for _ in 0..20.min(grad.len()) {
                    let j = rng.random_range(0..grad.len());
                    let mut plus = p.clone();
                    plus.get_mut(name).unwrap().data_mut()[j] += h;
                    let mut minus = p.clone();
                    minus.get_mut(name).unwrap().data_mut()[j] -= h;
                    let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let err = (grad[j] - num).abs() / grad[j].abs().max(num.abs()).max(1e-6);
                    assert!(err < 1e-4, "{name}[{j}]: tape {} vs numeric {num}", grad[j]);
                }
            }
        }
    }

    #[test]
    fn running_stats_untouched_by_backward() {
        let cfg = small();
        let p = ModelParams::<f64>::init(cfg.clone(), 2).unwrap();
        let x = random_input(2, &cfg, 2);
        let labels = vec![vec![0, 1]; 3];
        let before = p.get("bn.running_mean").unwrap().clone();
        let mut f = p.forward(&x, Some(&labels), Mode::Train, true).unwrap();
        f.backward().unwrap();
        assert!(matches!(f.backward(), Err(Error::GraphConsumed)));
        assert_eq!(p.get("bn.running_mean").unwrap(), &before);

        let mut q = p.clone();
        q.update_running_stats(f.bn_stats().unwrap());
        assert_ne!(q.get("bn.running_mean").unwrap(), &before);
    }
}
