//! The model zoo: LeNet-5 and CIFAR ResNets, each with an optional pair of
//! peer-regularization layers. A PR variant differs from its baseline only
//! by the inserted PR layers, so checkpoints remain weight-compatible in
//! both directions.

mod layers;
mod lenet;
mod resnet;

pub use layers::{BatchNorm, Conv, Linear, PrUnit};
pub use lenet::LeNet;
pub use resnet::{blocks_per_stage, Block, ResNet};

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::Rng as _;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::knn::{self, FeatureSet, PeerBank};
use crate::pr::{self, PRLayerConfig, PeerSource};
use crate::rng::{derive, seeded, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Architecture identifier: `lenet5`, `pr-lenet5`, `resnet{20,32,110}`,
/// `pr-resnet{20,32,110}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchId {
    LeNet5 { pr: bool },
    ResNet { depth: usize, pr: bool },
}

impl ArchId {
    pub fn parse(s: &str) -> Result<Self> {
        let (pr, rest) = match s.strip_prefix("pr-") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        if rest == "lenet5" {
            return Ok(ArchId::LeNet5 { pr });
        }
        if let Some(depth) = rest.strip_prefix("resnet") {
            let depth: usize = depth
                .parse()
                .map_err(|_| Error::UnknownArchitecture(s.to_string()))?;
            blocks_per_stage(depth)?;
            return Ok(ArchId::ResNet { depth, pr });
        }
        Err(Error::UnknownArchitecture(s.to_string()))
    }

    pub fn name(&self) -> String {
        match self {
            ArchId::LeNet5 { pr } => format!("{}lenet5", if *pr { "pr-" } else { "" }),
            ArchId::ResNet { depth, pr } => {
                format!("{}resnet{depth}", if *pr { "pr-" } else { "" })
            }
        }
    }

    pub fn is_pr(&self) -> bool {
        match self {
            ArchId::LeNet5 { pr } => *pr,
            ArchId::ResNet { pr, .. } => *pr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub arch: ArchId,
    pub num_classes: usize,
    /// Doubled feature maps after the last two stages: (16,16,64,128)
    /// instead of (16,16,32,64).
    pub v2: bool,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub pr: PRLayerConfig,
}

impl ModelSpec {
    pub fn mnist(arch: ArchId) -> Self {
        ModelSpec {
            arch,
            num_classes: 10,
            v2: false,
            input_channels: 1,
            input_hw: (28, 28),
            pr: PRLayerConfig::default(),
        }
    }

    pub fn cifar(arch: ArchId, num_classes: usize) -> Self {
        ModelSpec {
            arch,
            num_classes,
            v2: false,
            input_channels: 3,
            input_hw: (32, 32),
            pr: PRLayerConfig::default(),
        }
    }

    /// (stem, stage1, stage2, stage3) feature map counts.
    pub fn widths(&self) -> (usize, usize, usize, usize) {
        if self.v2 {
            (16, 16, 64, 128)
        } else {
            (16, 16, 32, 64)
        }
    }
}

/// Which of the two PR layers is being applied.
#[derive(Clone, Copy, Debug)]
pub enum PrStage {
    First,
    Second,
}

impl PrStage {
    fn index(self) -> usize {
        match self {
            PrStage::First => 0,
            PrStage::Second => 1,
        }
    }
}

/// Peer features captured at each PR layer entry point for a fixed bank,
/// computed once per bank by [`Model::precompute_bank`].
pub struct BankFeatures<T: Scalar> {
    pub per_layer: Vec<Rc<FeatureSet<T>>>,
    pub bank_seed: u64,
    pub n: usize,
}

/// Peer context of a forward pass: the training batch itself, a fixed bank,
/// or none (baseline models).
pub enum PeerCtx<'a, T: Scalar> {
    None,
    Batch,
    Bank(&'a BankFeatures<T>),
    /// Internal: bank precomputation captures each PR layer's input features
    /// while the bank aggregates over itself.
    CaptureSelf(&'a RefCell<Vec<Rc<FeatureSet<T>>>>),
}

pub struct ForwardCtx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub train: bool,
    pub rng: &'a mut Rng,
    pub peers: PeerCtx<'a, T>,
}

impl<T: Scalar> ForwardCtx<'_, T> {
    /// Build the peer graph for `features` under the current context and
    /// aggregate. Called by architectures at their PR insertion points.
    pub(crate) fn apply_pr(
        &mut self,
        stage: PrStage,
        features: &Tensor<T>,
        attn: &pr::AttentionParams<T>,
        cfg: &PRLayerConfig,
    ) -> Result<Tensor<T>> {
        match &self.peers {
            PeerCtx::None => Err(Error::invalid_argument(
                "peer-regularized model needs a peer context (batch or bank)",
            )),
            PeerCtx::Batch => {
                let fs = FeatureSet::from_chw(features)?;
                let drop = if self.train { cfg.distance_dropout } else { 0.0 };
                let graph = knn::build_train_graph(&fs, cfg.k, drop, self.rng)?;
                let mask_seed: u64 = self.rng.gen();
                pr::forward(
                    features,
                    &PeerSource::SelfSet,
                    &graph,
                    attn,
                    cfg,
                    self.train,
                    mask_seed,
                    self.tape,
                )
            }
            PeerCtx::Bank(bank) => {
                let peers = bank.per_layer.get(stage.index()).ok_or_else(|| {
                    Error::InvalidGraph(format!(
                        "bank features missing for PR stage {}",
                        stage.index()
                    ))
                })?;
                let qs = FeatureSet::from_chw(features)?;
                let graph = knn::build_test_graph(&qs, peers, cfg.k)?;
                pr::forward(
                    features,
                    &PeerSource::External(Rc::clone(peers)),
                    &graph,
                    attn,
                    cfg,
                    false,
                    0,
                    self.tape,
                )
            }
            PeerCtx::CaptureSelf(store) => {
                let fs = Rc::new(FeatureSet::from_chw(features)?);
                store.borrow_mut().push(Rc::clone(&fs));
                let graph = knn::build_test_graph(&fs, &fs, cfg.k)?;
                pr::forward(
                    features,
                    &PeerSource::External(fs),
                    &graph,
                    attn,
                    cfg,
                    false,
                    0,
                    self.tape,
                )
            }
        }
    }
}

enum Net<T: Scalar> {
    LeNet(LeNet<T>),
    ResNet(ResNet<T>),
}

/// A trainable parameter with its registry name and weight-decay tag.
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub decay: bool,
}

enum Slot<'a, T: Scalar> {
    Param { tensor: &'a Tensor<T>, decay: bool },
    Buffer(&'a RefCell<Vec<T>>),
}

/// Outcome of loading a checkpoint into a model.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model tensors with no matching entry (kept at their current values).
    pub missing: Vec<String>,
    /// Container entries with no matching tensor (ignored).
    pub ignored: Vec<String>,
}

pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    net: Net<T>,
    norm_mean: RefCell<Vec<T>>,
    norm_std: RefCell<Vec<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.pr.validate()?;
        let mut rng = seeded(seed);
        let net = match spec.arch {
            ArchId::LeNet5 { pr } => Net::LeNet(LeNet::new(
                spec.input_channels,
                spec.input_hw,
                spec.num_classes,
                pr,
                &mut rng,
            )?),
            ArchId::ResNet { depth, pr } => Net::ResNet(ResNet::new(
                depth,
                spec.input_channels,
                spec.num_classes,
                spec.widths(),
                pr,
                &mut rng,
            )?),
        };
        Ok(Model {
            spec: spec.clone(),
            net,
            norm_mean: RefCell::new(vec![T::zero(); spec.input_channels]),
            norm_std: RefCell::new(vec![T::one(); spec.input_channels]),
        })
    }

    pub fn is_pr(&self) -> bool {
        self.spec.arch.is_pr()
    }

    /// Per-channel statistics applied to [0,1] pixels at the input.
    pub fn set_normalization(&self, mean: &[T], std: &[T]) {
        *self.norm_mean.borrow_mut() = mean.to_vec();
        *self.norm_std.borrow_mut() = std.to_vec();
    }

    /// Logits for a `[B, C, H, W]` batch of [0,1]-range images. PR variants
    /// consume the peer context; baselines ignore it.
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_, T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (h, w) = self.spec.input_hw;
        if s.len() != 4 || s[1] != self.spec.input_channels || s[2] != h || s[3] != w {
            return Err(Error::invalid_shape(format!(
                "model expects [B, {}, {h}, {w}] input, got {s:?}",
                self.spec.input_channels
            )));
        }
        let normalized = {
            let mean = self.norm_mean.borrow();
            let std = self.norm_std.borrow();
            let scale: Vec<T> = std.iter().map(|&s| T::one() / s).collect();
            let shift: Vec<T> = mean
                .iter()
                .zip(std.iter())
                .map(|(&m, &s)| -m / s)
                .collect();
            x.channel_affine(&scale, &shift, ctx.tape)?
        };
        match &self.net {
            Net::LeNet(net) => net.forward(&normalized, &self.spec.pr, ctx),
            Net::ResNet(net) => net.forward(&normalized, &self.spec.pr, ctx),
        }
    }

    /// Deterministic eval-mode forward (no tape); returns logits.
    pub fn forward_eval(&self, x: &Tensor<T>, bank: Option<&BankFeatures<T>>) -> Result<Tensor<T>> {
        let tape = Tape::disabled();
        let mut rng = seeded(0);
        let peers = match bank {
            Some(b) => PeerCtx::Bank(b),
            None => PeerCtx::None,
        };
        let mut ctx = ForwardCtx {
            tape: &tape,
            train: false,
            rng: &mut rng,
            peers,
        };
        self.forward(x, &mut ctx)
    }

    /// Run the bank through the network once (aggregating over itself at
    /// each PR layer) and capture each PR layer's peer features.
    pub fn precompute_bank(&self, bank: &PeerBank<T>) -> Result<BankFeatures<T>> {
        if !self.is_pr() {
            return Ok(BankFeatures {
                per_layer: Vec::new(),
                bank_seed: bank.seed,
                n: bank.len(),
            });
        }
        let captured = RefCell::new(Vec::new());
        let tape = Tape::disabled();
        let mut rng = seeded(0);
        let mut ctx = ForwardCtx {
            tape: &tape,
            train: false,
            rng: &mut rng,
            peers: PeerCtx::CaptureSelf(&captured),
        };
        let _ = self.forward(&bank.images, &mut ctx)?;
        Ok(BankFeatures {
            per_layer: captured.into_inner(),
            bank_seed: bank.seed,
            n: bank.len(),
        })
    }

    /// Monte Carlo class probabilities: the mean softmax over `m` forward
    /// passes with independently sampled peer banks. Baselines are
    /// deterministic and use a single pass.
    pub fn mc_predict(
        &self,
        x: &Tensor<T>,
        sampler: Option<&BankSampler<'_, T>>,
        m: usize,
    ) -> Result<Tensor<T>> {
        let tape = Tape::disabled();
        if !self.is_pr() {
            return self.forward_eval(x, None)?.softmax(1, &tape);
        }
        let sampler =
            sampler.ok_or_else(|| Error::invalid_argument("PR model needs a bank sampler"))?;
        pr::mc_inference(m, |i| {
            let bank = sampler.bank(i)?;
            let features = self.precompute_bank(&bank)?;
            self.forward_eval(x, Some(&features))?.softmax(1, &tape)
        })
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |name, slot| {
            if let Slot::Param { tensor, decay } = slot {
                out.push(Param {
                    name: name.to_string(),
                    tensor: tensor.clone(),
                    decay,
                });
            }
        });
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|p| p.name).collect()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, Slot<'a, T>)) {
        fn conv<'a, T: Scalar>(f: &mut dyn FnMut(&str, Slot<'a, T>), name: &str, c: &'a Conv<T>) {
            f(&format!("{name}.weight"), Slot::Param { tensor: &c.weight, decay: true });
            if let Some(b) = &c.bias {
                f(&format!("{name}.bias"), Slot::Param { tensor: b, decay: false });
            }
        }
        fn linear<'a, T: Scalar>(
            f: &mut dyn FnMut(&str, Slot<'a, T>),
            name: &str,
            l: &'a Linear<T>,
        ) {
            f(&format!("{name}.weight"), Slot::Param { tensor: &l.weight, decay: true });
            f(&format!("{name}.bias"), Slot::Param { tensor: &l.bias, decay: false });
        }
        fn bn<'a, T: Scalar>(
            f: &mut dyn FnMut(&str, Slot<'a, T>),
            name: &str,
            b: &'a BatchNorm<T>,
        ) {
            f(&format!("{name}.gamma"), Slot::Param { tensor: &b.gamma, decay: false });
            f(&format!("{name}.beta"), Slot::Param { tensor: &b.beta, decay: false });
            f(&format!("{name}.running_mean"), Slot::Buffer(&b.stats.mean));
            f(&format!("{name}.running_var"), Slot::Buffer(&b.stats.var));
        }
        fn pr_unit<'a, T: Scalar>(
            f: &mut dyn FnMut(&str, Slot<'a, T>),
            name: &str,
            p: &'a PrUnit<T>,
        ) {
            f(&format!("{name}.attn.weight"), Slot::Param { tensor: &p.attn.weight, decay: true });
            f(&format!("{name}.attn.bias"), Slot::Param { tensor: &p.attn.bias, decay: false });
        }

        match &self.net {
            Net::LeNet(net) => {
                conv(f, "conv1", &net.conv1);
                if let Some(p) = &net.pr1 {
                    pr_unit(f, "pr1", p);
                }
                conv(f, "conv2", &net.conv2);
                if let Some(p) = &net.pr2 {
                    pr_unit(f, "pr2", p);
                }
                linear(f, "fc1", &net.fc1);
                linear(f, "fc2", &net.fc2);
                linear(f, "fc3", &net.fc3);
            }
            Net::ResNet(net) => {
                conv(f, "stem", &net.stem);
                bn(f, "stem_bn", &net.stem_bn);
                for (si, stage) in net.stages.iter().enumerate() {
                    for (bi, block) in stage.iter().enumerate() {
                        let base = format!("s{}.b{}", si + 1, bi);
                        conv(f, &format!("{base}.conv1"), &block.conv1);
                        bn(f, &format!("{base}.bn1"), &block.bn1);
                        conv(f, &format!("{base}.conv2"), &block.conv2);
                        bn(f, &format!("{base}.bn2"), &block.bn2);
                        if let Some((pconv, pbn)) = &block.proj {
                            conv(f, &format!("{base}.proj"), pconv);
                            bn(f, &format!("{base}.proj_bn"), pbn);
                        }
                    }
                }
                if let Some(p) = &net.pr1 {
                    pr_unit(f, "pr1", p);
                }
                if let Some(p) = &net.pr2 {
                    pr_unit(f, "pr2", p);
                }
                linear(f, "fc", &net.fc);
            }
        }
        f("norm.mean", Slot::Buffer(&self.norm_mean));
        f("norm.std", Slot::Buffer(&self.norm_std));
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        self.visit(&mut |name, slot| match slot {
            Slot::Param { tensor, .. } => c.push_tensor(name, tensor),
            Slot::Buffer(buf) => {
                let v: Vec<f32> = buf.borrow().iter().map(|x| x.as_f32()).collect();
                let len = v.len();
                c.push(name, vec![len], v);
            }
        });
        c
    }

    /// Name-matched weight loading: entries missing from the container keep
    /// their current (freshly initialized) values, extra entries are
    /// ignored. This is what makes baseline and PR checkpoints mutually
    /// loadable.
    pub fn load_weights(&self, container: &Container) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut used: Vec<bool> = vec![false; container.entries.len()];
        let mut err = None;
        self.visit(&mut |name, slot| {
            if err.is_some() {
                return;
            }
            let Some(pos) = container.entries.iter().position(|e| e.name == name) else {
                report.missing.push(name.to_string());
                return;
            };
            used[pos] = true;
            let entry = &container.entries[pos];
            match slot {
                Slot::Param { tensor, .. } => {
                    if entry.dims != tensor.shape() {
                        err = Some(Error::invalid_shape(format!(
                            "checkpoint entry {name} has dims {:?}, model expects {:?}",
                            entry.dims,
                            tensor.shape()
                        )));
                        return;
                    }
                    let mut data = tensor.data_mut();
                    for (d, &v) in data.iter_mut().zip(&entry.values) {
                        *d = T::from_f32(v);
                    }
                }
                Slot::Buffer(buf) => {
                    let mut b = buf.borrow_mut();
                    if entry.values.len() != b.len() {
                        err = Some(Error::invalid_shape(format!(
                            "checkpoint buffer {name} has {} values, model expects {}",
                            entry.values.len(),
                            b.len()
                        )));
                        return;
                    }
                    for (d, &v) in b.iter_mut().zip(&entry.values) {
                        *d = T::from_f32(v);
                    }
                }
            }
            report.loaded.push(name.to_string());
        });
        if let Some(e) = err {
            return Err(e);
        }
        for (pos, entry) in container.entries.iter().enumerate() {
            if !used[pos] {
                report.ignored.push(entry.name.clone());
            }
        }
        Ok(report)
    }

    /// Write the weight container plus a plain key=value spec header at
    /// `<path>.spec`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_container().write_to(path)?;
        let mut header = String::new();
        let _ = writeln!(header, "arch = {}", self.spec.arch.name());
        let _ = writeln!(header, "num_classes = {}", self.spec.num_classes);
        let _ = writeln!(header, "v2 = {}", self.spec.v2);
        let _ = writeln!(header, "input_channels = {}", self.spec.input_channels);
        let _ = writeln!(header, "input_h = {}", self.spec.input_hw.0);
        let _ = writeln!(header, "input_w = {}", self.spec.input_hw.1);
        let _ = writeln!(header, "k = {}", self.spec.pr.k);
        let _ = writeln!(header, "attention_dropout = {}", self.spec.pr.attention_dropout);
        let _ = writeln!(header, "distance_dropout = {}", self.spec.pr.distance_dropout);
        let _ = writeln!(header, "leaky_slope = {}", self.spec.pr.leaky_slope);
        let _ = writeln!(header, "mc_runs = {}", self.spec.pr.mc_runs);
        std::fs::write(spec_path(path), header)?;
        Ok(())
    }

    /// Rebuild a model from `save` output (container + spec header).
    pub fn load(path: impl AsRef<Path>) -> Result<Model<T>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(spec_path(path))?;
        let get = |key: &str| -> Result<String> {
            for line in text.lines() {
                if let Some((k, v)) = line.split_once('=') {
                    if k.trim() == key {
                        return Ok(v.trim().to_string());
                    }
                }
            }
            Err(Error::Data(format!("model spec header missing key {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Data(format!("bad value for {key}")))
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Data(format!("bad value for {key}")))
        };
        let spec = ModelSpec {
            arch: ArchId::parse(&get("arch")?)?,
            num_classes: parse_usize("num_classes")?,
            v2: get("v2")? == "true",
            input_channels: parse_usize("input_channels")?,
            input_hw: (parse_usize("input_h")?, parse_usize("input_w")?),
            pr: PRLayerConfig {
                k: parse_usize("k")?,
                attention_dropout: parse_f64("attention_dropout")?,
                distance_dropout: parse_f64("distance_dropout")?,
                leaky_slope: parse_f64("leaky_slope")?,
                literal_eq2_mode: false,
                mc_runs: parse_usize("mc_runs")?,
            },
        };
        let model = Model::build(&spec, 0)?;
        let container = Container::read_from(path)?;
        model.load_weights(&container)?;
        Ok(model)
    }
}

fn spec_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".spec");
    std::path::PathBuf::from(os)
}

/// Draws independent peer banks for Monte Carlo runs; bank `i` is sampled
/// with seed `derive(seed, i)`.
pub struct BankSampler<'a, T: Scalar> {
    pub pool: &'a Tensor<T>,
    pub n: usize,
    pub seed: u64,
}

impl<T: Scalar> BankSampler<'_, T> {
    pub fn bank(&self, idx: usize) -> Result<PeerBank<T>> {
        PeerBank::sample(self.pool, self.n, derive(self.seed, idx as u64))
    }
}
