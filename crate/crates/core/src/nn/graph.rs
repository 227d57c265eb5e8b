use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Scalar, SeededRng, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a network is for. Only informational, except that purifiers are
/// validated against the no-global-skip rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    FeatureExtractor,
    Purifier,
    Critic,
    Classifier,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input,
    Conv2d {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    /// `running_mean`/`running_var` index the buffer list.
    BatchNorm {
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
    },
    MaxPool2,
    GlobalAvgPool,
    /// Channel-axis concatenation of all inputs, in order.
    Concat,
    Dense {
        weight: usize,
        bias: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

/// Named intermediate output of a network.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tap(pub String);

impl Tap {
    pub fn new(name: impl Into<String>) -> Self {
        Tap(name.into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Tap {
    fn from(s: &str) -> Self {
        Tap(s.to_string())
    }
}

/// Declarative layer graph plus its parameters.
///
/// Layers are stored in topological order: every layer's inputs have a
/// smaller index. Layer 0 is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef<T: Scalar = f32> {
    pub role: NetRole,
    layers: Vec<Layer>,
    param_names: Vec<String>,
    params: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    taps: Vec<(String, usize)>,
    output: usize,
}

/// Parameters of a network recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    params: Vec<Var>,
}

impl Bound {
    /// Uses existing tape variables as the parameters, in declaration order.
    pub fn from_vars(params: Vec<Var>) -> Self {
        Self { params }
    }

    pub fn vars(&self) -> &[Var] {
        &self.params
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    /// Final output, absent for truncated (taps-only) passes.
    pub output: Option<Var>,
    /// Requested taps, in request order.
    pub taps: Vec<Var>,
    /// Batch statistics from train-mode batch-norm layers.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn out(&self) -> Var {
        self.output.expect("forward pass computed the output")
    }
}

impl<T: Scalar> NetworkDef<T> {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_layer(&self) -> usize {
        self.output
    }

    /// Directed edges `(from, to)` of the connection graph.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(to, l)| l.inputs.iter().map(move |&from| (from, to)))
            .collect()
    }

    /// Declared tap names, ordered by depth.
    pub fn tap_names(&self) -> Vec<&str> {
        self.taps.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn tap_layer(&self, tap: &Tap) -> Result<usize> {
        self.taps
            .iter()
            .find(|(n, _)| n == &tap.0)
            .map(|&(_, i)| i)
            .ok_or_else(|| Error::UnknownTap(tap.0.clone()))
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Every persisted tensor (parameters, then buffers) with its name.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.param_names
            .iter()
            .map(String::as_str)
            .zip(&self.params)
            .chain(self.buffer_names.iter().map(String::as_str).zip(&self.buffers))
            .collect()
    }

    /// Replaces a persisted tensor by name; the shape must match.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = if let Some(i) = self.param_names.iter().position(|n| n == name) {
            &mut self.params[i]
        } else if let Some(i) = self.buffer_names.iter().position(|n| n == name) {
            &mut self.buffers[i]
        } else {
            return Err(Error::CheckpointMismatch {
                name: name.to_string(),
                detail: "no tensor of that name in the network".into(),
            });
        };
        if slot.shape() != value.shape() {
            return Err(Error::CheckpointMismatch {
                name: name.to_string(),
                detail: format!("expected shape {:?}, found {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NetworkDef<U> {
        NetworkDef {
            role: self.role,
            layers: self.layers.clone(),
            param_names: self.param_names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            taps: self.taps.clone(),
            output: self.output,
        }
    }

    /// Checks topological order, parameter references and, for purifiers,
    /// the absence of a convolution-free input-to-output path.
    pub fn validate(&self) -> Result<()> {
        if self.layers.first().map(|l| &l.kind) != Some(&LayerKind::Input) {
            return Err(Error::Graph("layer 0 must be the input".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 && l.kind == LayerKind::Input {
                return Err(Error::Graph(format!("second input layer `{}`", l.name)));
            }
            if let Some(&bad) = l.inputs.iter().find(|&&j| j >= i) {
                return Err(Error::Graph(format!(
                    "layer `{}` ({i}) consumes layer {bad}: graph is not topologically ordered",
                    l.name
                )));
            }
            let expect_inputs = match l.kind {
                LayerKind::Input => l.inputs.is_empty(),
                LayerKind::Concat => !l.inputs.is_empty(),
                _ => l.inputs.len() == 1,
            };
            if !expect_inputs {
                return Err(Error::Graph(format!(
                    "layer `{}` has {} inputs",
                    l.name,
                    l.inputs.len()
                )));
            }
            let refs: Vec<usize> = match &l.kind {
                LayerKind::Conv2d { weight, bias, .. } | LayerKind::Dense { weight, bias } => {
                    std::iter::once(*weight).chain(*bias).collect()
                }
                LayerKind::BatchNorm { gamma, beta, .. } => vec![*gamma, *beta],
                _ => vec![],
            };
            if refs.iter().any(|&p| p >= self.params.len()) {
                return Err(Error::Graph(format!(
                    "layer `{}` references a missing parameter",
                    l.name
                )));
            }
        }
        if self.output >= self.layers.len() {
            return Err(Error::Graph("output layer out of range".into()));
        }
        if self.role == NetRole::Purifier && self.has_conv_free_path() {
            return Err(Error::Graph(
                "purifier has an input-to-output path that bypasses every convolution".into(),
            ));
        }
        Ok(())
    }

    /// True if the output is reachable from the input without passing
    /// through a convolution layer.
    pub fn has_conv_free_path(&self) -> bool {
        let mut succ = vec![Vec::new(); self.layers.len()];
        for (from, to) in self.edges() {
            succ[from].push(to);
        }
        let mut seen = vec![false; self.layers.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            if i == self.output {
                return true;
            }
            for &j in &succ[i] {
                if !seen[j] && !matches!(self.layers[j].kind, LayerKind::Conv2d { .. }) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        false
    }

    /// Records all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            params: self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect(),
        }
    }

    /// Full forward pass; returns only the final output.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        self.run(tape, bound, x, mode, &[], true)
    }

    /// Full forward pass that also returns the requested taps.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        taps: &[Tap],
    ) -> Result<ForwardOutput<T>> {
        self.run(tape, bound, x, mode, taps, true)
    }

    /// Evaluates only the layers the requested taps depend on.
    pub fn forward_to_taps(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        taps: &[Tap],
    ) -> Result<ForwardOutput<T>> {
        self.run(tape, bound, x, mode, taps, false)
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        taps: &[Tap],
        want_output: bool,
    ) -> Result<ForwardOutput<T>> {
        let tap_layers = taps.iter().map(|t| self.tap_layer(t)).collect::<Result<Vec<_>>>()?;
        let mut needed = vec![false; self.layers.len()];
        if want_output {
            needed[self.output] = true;
        }
        for &t in &tap_layers {
            needed[t] = true;
        }
        for i in (0..self.layers.len()).rev() {
            if needed[i] {
                for &j in &self.layers[i].inputs {
                    needed[j] = true;
                }
            }
        }
        let p = &bound.params;
        let mut vals: Vec<Option<Var>> = vec![None; self.layers.len()];
        let mut batch_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let input = |k: usize| vals[layer.inputs[k]].expect("inputs evaluated first");
            let v = match &layer.kind {
                LayerKind::Input => x,
                LayerKind::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => tape.conv2d(input(0), p[*weight], bias.map(|b| p[b]), *stride, *padding)?,
                LayerKind::LeakyRelu { slope } => tape.leaky_relu(input(0), T::lit(*slope)),
                LayerKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => match mode {
                    Mode::Train => {
                        let (v, stats) = tape.batch_norm_train(input(0), p[*gamma], p[*beta], T::lit(BN_EPS))?;
                        batch_stats.push((i, stats));
                        v
                    }
                    Mode::Eval => tape.batch_norm_eval(
                        input(0),
                        p[*gamma],
                        p[*beta],
                        self.buffers[*running_mean].data(),
                        self.buffers[*running_var].data(),
                        T::lit(BN_EPS),
                    )?,
                },
                LayerKind::MaxPool2 => tape.max_pool2(input(0))?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(input(0))?,
                LayerKind::Concat => {
                    let parts: Vec<Var> = (0..layer.inputs.len()).map(input).collect();
                    tape.concat(&parts)?
                }
                LayerKind::Dense { weight, bias } => {
                    let mut h = input(0);
                    let s = tape.shape(h).to_vec();
                    if s.len() != 2 {
                        h = tape.reshape(h, &[s[0], s[1..].iter().product()])?;
                    }
                    tape.dense(h, p[*weight], bias.map(|b| p[b]))?
                }
            };
            vals[i] = Some(v);
        }
        Ok(ForwardOutput {
            output: want_output.then(|| vals[self.output].expect("output evaluated")),
            taps: tap_layers.iter().map(|&t| vals[t].expect("tap evaluated")).collect(),
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        for (layer, s) in stats {
            if let LayerKind::BatchNorm {
                running_mean,
                running_var,
                ..
            } = self.layers[*layer].kind
            {
                let blend = |old: &Tensor<T>, new: &[T]| {
                    Tensor::from_fn(old.shape().to_vec(), |c| (T::one() - m) * old.data()[c] + m * new[c])
                };
                self.buffers[running_mean] = blend(&self.buffers[running_mean], &s.mean);
                self.buffers[running_var] = blend(&self.buffers[running_var], &s.var);
            }
        }
    }

    /// Eval-mode output without recording gradients.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        Ok(tape.value(out.out()).clone())
    }

    /// Eval-mode tap values via a truncated pass.
    pub fn infer_taps(&self, x: &Tensor<T>, taps: &[Tap]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_to_taps(&mut tape, &bound, xv, Mode::Eval, taps)?;
        Ok(out.taps.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Sub-network whose output is the given tap, keeping only the layers
    /// it depends on.
    pub fn truncated(&self, tap: &Tap) -> Result<Self> {
        let end = self.tap_layer(tap)?;
        let mut needed = vec![false; self.layers.len()];
        needed[end] = true;
        for i in (0..=end).rev() {
            if needed[i] {
                for &j in &self.layers[i].inputs {
                    needed[j] = true;
                }
            }
        }
        let mut remap = vec![usize::MAX; self.layers.len()];
        let mut layers = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if needed[i] {
                remap[i] = layers.len();
                let mut l = l.clone();
                l.inputs = l.inputs.iter().map(|&j| remap[j]).collect();
                layers.push(l);
            }
        }
        let taps = self
            .taps
            .iter()
            .filter(|(_, i)| needed[*i])
            .map(|(n, i)| (n.clone(), remap[*i]))
            .collect();
        Ok(Self {
            role: NetRole::Custom,
            layers,
            param_names: self.param_names.clone(),
            params: self.params.clone(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.clone(),
            taps,
            output: remap[end],
        })
    }

    /// Single 1x1 convolution with an identity kernel: output equals input
    /// exactly.
    pub fn identity(channels: usize) -> Self {
        let mut b = GraphBuilder::new(NetRole::Purifier);
        let w = Tensor::from_fn(vec![channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                T::one()
            } else {
                T::zero()
            }
        });
        let wi = b.param("identity.weight", w);
        let out = b.layer(
            "identity",
            LayerKind::Conv2d {
                weight: wi,
                bias: None,
                stride: 1,
                padding: 0,
            },
            vec![0],
        );
        b.finish(out)
    }
}

/// Incremental construction of a [`NetworkDef`] in topological order.
#[derive(Debug)]
pub struct GraphBuilder<T: Scalar> {
    role: NetRole,
    layers: Vec<Layer>,
    param_names: Vec<String>,
    params: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    taps: Vec<(String, usize)>,
}

impl<T: Scalar> GraphBuilder<T> {
    /// Starts a graph with the input as layer 0.
    pub fn new(role: NetRole) -> Self {
        Self {
            role,
            layers: vec![Layer {
                name: "input".into(),
                kind: LayerKind::Input,
                inputs: vec![],
            }],
            param_names: vec![],
            params: vec![],
            buffer_names: vec![],
            buffers: vec![],
            taps: vec![],
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.param_names.push(name.into());
        self.params.push(t);
        self.params.len() - 1
    }

    pub fn buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.buffer_names.push(name.into());
        self.buffers.push(t);
        self.buffers.len() - 1
    }

    pub fn layer(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.layers.push(Layer {
            name: name.into(),
            kind,
            inputs,
        });
        self.layers.len() - 1
    }

    pub fn tap(&mut self, name: impl Into<String>, layer: usize) {
        self.taps.push((name.into(), layer));
    }

    /// Convolution with Kaiming fan-in initialization and optional zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        input: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut SeededRng,
    ) -> usize {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = rng.normal_tensor(vec![cout, cin, kernel, kernel], 0.0, gain / fan_in.sqrt());
        let weight = self.param(format!("{name}.weight"), w);
        let bias = bias.then(|| self.param(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        self.layer(
            name,
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding: kernel / 2,
            },
            vec![input],
        )
    }

    pub fn dense(
        &mut self,
        name: &str,
        input: usize,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> usize {
        let w = rng.normal_tensor(vec![fout, fin], 0.0, gain / (fin as f64).sqrt());
        let weight = self.param(format!("{name}.weight"), w);
        let bias = Some(self.param(format!("{name}.bias"), Tensor::zeros(vec![fout])));
        self.layer(name, LayerKind::Dense { weight, bias }, vec![input])
    }

    pub fn batch_norm(&mut self, name: &str, input: usize, channels: usize) -> usize {
        let gamma = self.param(format!("{name}.gamma"), Tensor::ones(vec![channels]));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        let running_mean = self.buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]));
        let running_var = self.buffer(format!("{name}.running_var"), Tensor::ones(vec![channels]));
        self.layer(
            name,
            LayerKind::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
            vec![input],
        )
    }

    pub fn leaky_relu(&mut self, name: &str, input: usize, slope: f64) -> usize {
        self.layer(name, LayerKind::LeakyRelu { slope }, vec![input])
    }

    pub fn finish(self, output: usize) -> NetworkDef<T> {
        NetworkDef {
            role: self.role,
            layers: self.layers,
            param_names: self.param_names,
            params: self.params,
            buffer_names: self.buffer_names,
            buffers: self.buffers,
            taps: self.taps,
            output,
        }
    }
}

/// Kaiming gain for a leaky-relu with the given negative slope.
pub fn leaky_relu_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}
