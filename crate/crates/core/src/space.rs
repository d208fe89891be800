//! The discrete search space: six dilated-kernel choices per layer of a
//! fixed 1-D residual backbone, and the shared parameter bank every sampled
//! child network borrows its layers from.

use std::path::Path;

use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::error::{KforgeError, Result};
use crate::ops::{self, NormMode};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Number of candidate kernels per layer.
pub const NUM_CHOICES: usize = 6;

const CHOICE_TABLE: [(usize, usize); NUM_CHOICES] =
    [(3, 1), (3, 2), (3, 3), (5, 1), (5, 2), (5, 3)];

/// One of the six candidate kernels, a (kernel size, dilation) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelChoice {
    index: usize,
}

impl KernelChoice {
    pub fn new(index: usize) -> Result<KernelChoice> {
        if index >= NUM_CHOICES {
            return Err(KforgeError::IndexOutOfBounds {
                what: "kernel choice",
                index,
                size: NUM_CHOICES,
            });
        }
        Ok(KernelChoice { index })
    }

    pub fn from_parts(kernel_size: usize, dilation: usize) -> Result<KernelChoice> {
        CHOICE_TABLE
            .iter()
            .position(|&(k, d)| k == kernel_size && d == dilation)
            .map(|index| KernelChoice { index })
            .ok_or_else(|| KforgeError::InvalidArchitecture(format!(
                "no candidate kernel with k={kernel_size}, d={dilation}"
            )))
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn kernel_size(&self) -> usize {
        CHOICE_TABLE[self.index].0
    }

    pub fn dilation(&self) -> usize {
        CHOICE_TABLE[self.index].1
    }

    /// Length-preserving padding, `d (k - 1) / 2` (integral for all choices).
    pub fn padding(&self) -> usize {
        self.dilation() * (self.kernel_size() - 1) / 2
    }
}

/// A full token list `a_1..a_L`, one kernel choice per searched layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Architecture {
    tokens: Vec<usize>,
}

impl Architecture {
    pub fn new(tokens: Vec<usize>) -> Result<Architecture> {
        for &t in &tokens {
            KernelChoice::new(t)?;
        }
        if tokens.is_empty() {
            return Err(KforgeError::InvalidArchitecture("empty token list".into()));
        }
        Ok(Architecture { tokens })
    }

    /// All layers set to the same choice (the hand-designed comparators).
    pub fn uniform(token: usize, len: usize) -> Result<Architecture> {
        KernelChoice::new(token)?;
        Architecture::new(vec![token; len])
    }

    /// Parse the whitespace-separated text encoding, e.g. `"0 3 1 5"`.
    pub fn parse(text: &str) -> Result<Architecture> {
        let tokens = text
            .split_whitespace()
            .map(|w| {
                w.parse::<usize>().map_err(|_| {
                    KforgeError::InvalidArchitecture(format!("bad token {w:?} in {text:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Architecture::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn choice(&self, position: usize) -> KernelChoice {
        KernelChoice {
            index: self.tokens[position],
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let words: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        write!(f, "{}", words.join(" "))
    }
}

/// Exact size of the space, `n^l`.
pub fn space_size(n: usize, l: u32) -> Result<u64> {
    (n as u64)
        .checked_pow(l)
        .ok_or(KforgeError::SpaceOverflow { n, l })
}

/// The fixed backbone around the searched kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub input_length: usize,
}

impl Default for StructureConfig {
    fn default() -> StructureConfig {
        StructureConfig {
            num_blocks: 4,
            layers_per_block: 2,
            base_channels: 8,
            num_classes: 6,
            input_length: 1000,
        }
    }
}

pub const STEM_KERNEL: usize = 7;
pub const STEM_STRIDE: usize = 2;
pub const DOWN_KERNEL: usize = 3;
pub const DOWN_STRIDE: usize = 2;

impl StructureConfig {
    /// Number of searched layers, `L = blocks x layers per block`.
    pub fn num_layers(&self) -> usize {
        self.num_blocks * self.layers_per_block
    }

    /// Channel count inside block `b`: doubles per block, 8, 16, 32, 64.
    pub fn block_channels(&self, block: usize) -> usize {
        self.base_channels << block
    }

    /// Channels entering the classifier (after the final downsample).
    pub fn classifier_channels(&self) -> usize {
        self.base_channels << self.num_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0
            || self.layers_per_block == 0
            || self.base_channels == 0
            || self.num_classes == 0
        {
            return Err(KforgeError::Config(
                "structure counts must be positive".into(),
            ));
        }
        // Every stride-2 stage must keep at least one time step.
        let mut t = self.input_length;
        t = conv_out_len(t, STEM_KERNEL, STEM_STRIDE, (STEM_KERNEL - 1) / 2)?;
        for _ in 0..self.num_blocks {
            t = conv_out_len(t, DOWN_KERNEL, DOWN_STRIDE, (DOWN_KERNEL - 1) / 2)?;
        }
        let _ = t;
        Ok(())
    }
}

fn conv_out_len(t: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = k; // dilation 1
    if t + 2 * padding < span {
        return Err(KforgeError::Config(format!(
            "temporal length {t} collapses below kernel span {span}"
        )));
    }
    Ok((t + 2 * padding - span) / stride + 1)
}

/// Convolution + batch-norm parameter set, one per bank entry and per fixed
/// layer. Cloning aliases the same storage.
#[derive(Clone, Debug)]
pub struct ConvNormParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl ConvNormParams {
    fn init(c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> ConvNormParams {
        let weight = Tensor::param(&[c_out, c_in, k], he_uniform(c_in * k, c_out * c_in * k, rng))
            .expect("conv weight");
        let bias = Tensor::param(&[c_out], vec![0.0; c_out]).expect("conv bias");
        let gamma = Tensor::param(&[c_out], vec![1.0; c_out]).expect("gamma");
        let beta = Tensor::param(&[c_out], vec![0.0; c_out]).expect("beta");
        let running_mean = Tensor::zeros(&[c_out]);
        let running_var = Tensor::from_vec(&[c_out], vec![1.0; c_out]).expect("rv");
        ConvNormParams {
            weight,
            bias,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    fn trainable(&self) -> [Tensor; 4] {
        [
            self.weight.clone(),
            self.bias.clone(),
            self.gamma.clone(),
            self.beta.clone(),
        ]
    }

    fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}/conv.w"), self.weight.clone()),
            (format!("{prefix}/conv.b"), self.bias.clone()),
            (format!("{prefix}/norm.gamma"), self.gamma.clone()),
            (format!("{prefix}/norm.beta"), self.beta.clone()),
            (format!("{prefix}/norm.running_mean"), self.running_mean.clone()),
            (format!("{prefix}/norm.running_var"), self.running_var.clone()),
        ]
    }
}

/// Scaled-uniform weight init with bound `sqrt(6 / fan_in)`.
fn he_uniform(fan_in: usize, numel: usize, rng: &mut Rng) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
}

/// The shared store of candidate kernels: one conv+norm parameter set per
/// (position, choice), plus the fixed stem, downsample and classifier
/// parameters. Entry identity is stable — retrieving the same slot twice
/// returns the same storage.
pub struct KernelBank {
    structure: StructureConfig,
    num_choices: usize,
    searched: Vec<Vec<ConvNormParams>>,
    stem: ConvNormParams,
    downs: Vec<ConvNormParams>,
    classifier_w: Tensor,
    classifier_b: Tensor,
}

impl KernelBank {
    pub fn init(structure: &StructureConfig, num_choices: usize, rng: &mut Rng) -> KernelBank {
        let stem = ConvNormParams::init(1, structure.base_channels, STEM_KERNEL, rng);
        let mut searched = Vec::with_capacity(structure.num_layers());
        for pos in 0..structure.num_layers() {
            let ch = structure.block_channels(pos / structure.layers_per_block);
            let mut per_choice = Vec::with_capacity(num_choices);
            for c in 0..num_choices {
                let k = KernelChoice::new(c % NUM_CHOICES).expect("choice").kernel_size();
                per_choice.push(ConvNormParams::init(ch, ch, k, rng));
            }
            searched.push(per_choice);
        }
        let mut downs = Vec::with_capacity(structure.num_blocks);
        for b in 0..structure.num_blocks {
            let c_in = structure.block_channels(b);
            downs.push(ConvNormParams::init(c_in, 2 * c_in, DOWN_KERNEL, rng));
        }
        let f_in = structure.classifier_channels();
        let classifier_w = Tensor::param(
            &[structure.num_classes, f_in],
            he_uniform(f_in, structure.num_classes * f_in, rng),
        )
        .expect("classifier w");
        let classifier_b =
            Tensor::param(&[structure.num_classes], vec![0.0; structure.num_classes])
                .expect("classifier b");
        KernelBank {
            structure: structure.clone(),
            num_choices,
            searched,
            stem,
            downs,
            classifier_w,
            classifier_b,
        }
    }

    pub fn structure(&self) -> &StructureConfig {
        &self.structure
    }

    pub fn num_choices(&self) -> usize {
        self.num_choices
    }

    pub fn num_searched_sets(&self) -> usize {
        self.searched.iter().map(Vec::len).sum()
    }

    pub fn entry(&self, position: usize, choice: usize) -> Result<&ConvNormParams> {
        let per_choice = self
            .searched
            .get(position)
            .ok_or(KforgeError::IndexOutOfBounds {
                what: "bank position",
                index: position,
                size: self.searched.len(),
            })?;
        per_choice.get(choice).ok_or(KforgeError::IndexOutOfBounds {
            what: "bank choice",
            index: choice,
            size: per_choice.len(),
        })
    }

    /// Assemble a child network whose searched layers alias bank storage.
    pub fn build_child(&self, arch: &Architecture) -> Result<ChildNetwork> {
        if arch.len() != self.structure.num_layers() {
            return Err(KforgeError::InvalidArchitecture(format!(
                "architecture has {} tokens, structure needs {}",
                arch.len(),
                self.structure.num_layers()
            )));
        }
        let mut layers = Vec::with_capacity(arch.len());
        for (pos, &token) in arch.tokens().iter().enumerate() {
            if token >= self.num_choices {
                return Err(KforgeError::IndexOutOfBounds {
                    what: "architecture token",
                    index: token,
                    size: self.num_choices,
                });
            }
            layers.push((self.entry(pos, token)?.clone(), arch.choice(pos)));
        }
        Ok(ChildNetwork {
            structure: self.structure.clone(),
            arch: arch.clone(),
            stem: self.stem.clone(),
            layers,
            downs: self.downs.clone(),
            classifier_w: self.classifier_w.clone(),
            classifier_b: self.classifier_b.clone(),
        })
    }

    /// Every tensor under its checkpoint name (searched entries, fixed
    /// layers, running statistics).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.stem.named("stem");
        for (pos, per_choice) in self.searched.iter().enumerate() {
            for (c, p) in per_choice.iter().enumerate() {
                out.extend(p.named(&format!("pos{pos}/choice{c}")));
            }
        }
        for (b, d) in self.downs.iter().enumerate() {
            out.extend(d.named(&format!("down{b}")));
        }
        out.push(("classifier/w".into(), self.classifier_w.clone()));
        out.push(("classifier/b".into(), self.classifier_b.clone()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        for (name, t) in self.named_tensors() {
            ck.insert_tensor(name, &t);
        }
        ck.save(path)
    }

    pub fn load_into(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        for (name, t) in self.named_tensors() {
            ck.load_into(path, &name, &t)?;
        }
        Ok(())
    }
}

/// A concrete network: the fixed backbone plus one chosen kernel per layer.
/// Built either against the bank (shared storage) or fresh for from-scratch
/// training.
pub struct ChildNetwork {
    pub structure: StructureConfig,
    pub arch: Architecture,
    stem: ConvNormParams,
    layers: Vec<(ConvNormParams, KernelChoice)>,
    downs: Vec<ConvNormParams>,
    classifier_w: Tensor,
    classifier_b: Tensor,
}

impl ChildNetwork {
    /// Freshly initialized parameters for `arch` (no bank involvement).
    pub fn fresh(arch: &Architecture, structure: &StructureConfig, rng: &mut Rng) -> Result<ChildNetwork> {
        if arch.len() != structure.num_layers() {
            return Err(KforgeError::InvalidArchitecture(format!(
                "architecture has {} tokens, structure needs {}",
                arch.len(),
                structure.num_layers()
            )));
        }
        let stem = ConvNormParams::init(1, structure.base_channels, STEM_KERNEL, rng);
        let mut layers = Vec::with_capacity(arch.len());
        for (pos, &_token) in arch.tokens().iter().enumerate() {
            let ch = structure.block_channels(pos / structure.layers_per_block);
            let choice = arch.choice(pos);
            layers.push((ConvNormParams::init(ch, ch, choice.kernel_size(), rng), choice));
        }
        let mut downs = Vec::with_capacity(structure.num_blocks);
        for b in 0..structure.num_blocks {
            let c_in = structure.block_channels(b);
            downs.push(ConvNormParams::init(c_in, 2 * c_in, DOWN_KERNEL, rng));
        }
        let f_in = structure.classifier_channels();
        let classifier_w = Tensor::param(
            &[structure.num_classes, f_in],
            he_uniform(f_in, structure.num_classes * f_in, rng),
        )?;
        let classifier_b = Tensor::param(&[structure.num_classes], vec![0.0; structure.num_classes])?;
        Ok(ChildNetwork {
            structure: structure.clone(),
            arch: arch.clone(),
            stem,
            layers,
            downs,
            classifier_w,
            classifier_b,
        })
    }

    fn conv_norm(
        &self,
        tape: &mut Tape,
        p: &ConvNormParams,
        x: &Tensor,
        stride: usize,
        dilation: usize,
        padding: usize,
        mode: NormMode,
    ) -> Result<Tensor> {
        let y = ops::conv1d(tape, x, &p.weight, &p.bias, stride, dilation, padding)?;
        ops::batchnorm1d(tape, &y, &p.gamma, &p.beta, &p.running_mean, &p.running_var, mode)
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        block: usize,
        x: &Tensor,
        mode: NormMode,
    ) -> Result<Tensor> {
        let per = self.structure.layers_per_block;
        let mut h = x.clone();
        for j in 0..per {
            let (p, choice) = &self.layers[block * per + j];
            h = self.conv_norm(tape, p, &h, 1, choice.dilation(), choice.padding(), mode)?;
            if j + 1 < per {
                h = ops::relu(tape, &h)?;
            }
        }
        let merged = ops::add(tape, &h, x)?;
        ops::relu(tape, &merged)
    }

    /// Stem, residual blocks with downsampling, pooling and classifier.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != 1 || shape[2] != self.structure.input_length {
            return Err(KforgeError::ShapeMismatch {
                op: "child_forward",
                detail: format!(
                    "input {shape:?}, expected [batch, 1, {}]",
                    self.structure.input_length
                ),
            });
        }
        let mut h = self.conv_norm(
            tape,
            &self.stem,
            x,
            STEM_STRIDE,
            1,
            (STEM_KERNEL - 1) / 2,
            mode,
        )?;
        h = ops::relu(tape, &h)?;
        for b in 0..self.structure.num_blocks {
            h = self.block_forward(tape, b, &h, mode)?;
            h = self.conv_norm(tape, &self.downs[b], &h, DOWN_STRIDE, 1, (DOWN_KERNEL - 1) / 2, mode)?;
            h = ops::relu(tape, &h)?;
        }
        let pooled = ops::global_avg_pool(tape, &h)?;
        ops::linear(tape, &pooled, &self.classifier_w, &self.classifier_b)
    }

    /// The feature map shape `(channels, length)` just before pooling.
    pub fn feature_shape(&self) -> Result<(usize, usize)> {
        let mut tape = Tape::inference();
        let x = Tensor::zeros(&[1, 1, self.structure.input_length]);
        let mut h = self.conv_norm(
            &mut tape,
            &self.stem,
            &x,
            STEM_STRIDE,
            1,
            (STEM_KERNEL - 1) / 2,
            NormMode::Eval,
        )?;
        for b in 0..self.structure.num_blocks {
            h = self.block_forward(&mut tape, b, &h, NormMode::Eval)?;
            h = self.conv_norm(
                &mut tape,
                &self.downs[b],
                &h,
                DOWN_STRIDE,
                1,
                (DOWN_KERNEL - 1) / 2,
                NormMode::Eval,
            )?;
        }
        let s = h.shape();
        Ok((s[1], s[2]))
    }

    /// Every trainable tensor of this child, searched layers first.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (p, _) in &self.layers {
            out.extend(p.trainable());
        }
        out.extend(self.stem.trainable());
        for d in &self.downs {
            out.extend(d.trainable());
        }
        out.push(self.classifier_w.clone());
        out.push(self.classifier_b.clone());
        out
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let per = self.structure.layers_per_block;
        let mut out = self.stem.named("stem");
        for (pos, (p, _)) in self.layers.iter().enumerate() {
            out.extend(p.named(&format!("block{}/layer{}", pos / per, pos % per)));
        }
        for (b, d) in self.downs.iter().enumerate() {
            out.extend(d.named(&format!("down{b}")));
        }
        out.push(("classifier/w".into(), self.classifier_w.clone()));
        out.push(("classifier/b".into(), self.classifier_b.clone()));
        out
    }

    /// Self-describing checkpoint: parameters plus architecture/structure
    /// metadata, so a model can be reloaded without external context.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        for (name, t) in self.named_tensors() {
            ck.insert_tensor(name, &t);
        }
        let arch: Vec<f64> = self.arch.tokens().iter().map(|&t| t as f64).collect();
        ck.insert("meta/arch", &[arch.len()], arch);
        let s = &self.structure;
        ck.insert(
            "meta/structure",
            &[5],
            vec![
                s.num_blocks as f64,
                s.layers_per_block as f64,
                s.base_channels as f64,
                s.num_classes as f64,
                s.input_length as f64,
            ],
        );
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<ChildNetwork> {
        let ck = Checkpoint::load(path)?;
        let missing = |name: &str| KforgeError::Checkpoint {
            path: path.display().to_string(),
            detail: format!("missing entry {name}"),
        };
        let (_, meta) = ck.get("meta/structure").ok_or_else(|| missing("meta/structure"))?;
        if meta.len() != 5 {
            return Err(KforgeError::Checkpoint {
                path: path.display().to_string(),
                detail: format!("meta/structure has {} fields, expected 5", meta.len()),
            });
        }
        let structure = StructureConfig {
            num_blocks: meta[0] as usize,
            layers_per_block: meta[1] as usize,
            base_channels: meta[2] as usize,
            num_classes: meta[3] as usize,
            input_length: meta[4] as usize,
        };
        structure.validate().map_err(|e| KforgeError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let (_, arch_f) = ck.get("meta/arch").ok_or_else(|| missing("meta/arch"))?;
        let arch = Architecture::new(arch_f.iter().map(|&v| v as usize).collect())?;
        let mut rng = crate::rng::stream(0, "model-load");
        let net = ChildNetwork::fresh(&arch, &structure, &mut rng)?;
        for (name, t) in net.named_tensors() {
            ck.load_into(path, &name, &t)?;
        }
        Ok(net)
    }
}
