//! Split processing functions and the parameter registry.
//!
//! Topology (per item, `N_comp` tasks):
//!
//! ```text
//! x_i --pre_i--> bind(key_i) --+
//!                              +--> superpose --f_t--> t --precoder--> ...
//! x_j --pre_j--> bind(key_j) --+
//!
//! ... --postcoder--> f_r --+--unbind_i--head_i--> logits_i
//!                          +--unbind_j--head_j--> logits_j
//! ```

use crate::diffcore::{Gradients, RealTensor, Tape, Var};
use crate::error::{Error, Result};
use crate::vsa::{self, BindingKeySet, UnbindSet};
use rand::Rng;
use std::collections::HashMap;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    DisjointPre,
    Ft,
    Precoder,
    Postcoder,
    Fr,
    Heads,
    Keys,
    Unbind,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::DisjointPre,
        ParamGroup::Ft,
        ParamGroup::Precoder,
        ParamGroup::Postcoder,
        ParamGroup::Fr,
        ParamGroup::Heads,
        ParamGroup::Keys,
        ParamGroup::Unbind,
    ];

    /// Groups left trainable during test-time adaptation.
    pub const ADAPTABLE: [ParamGroup; 4] =
        [ParamGroup::Precoder, ParamGroup::Postcoder, ParamGroup::Keys, ParamGroup::Unbind];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::DisjointPre => "disjoint_pre",
            ParamGroup::Ft => "f_t",
            ParamGroup::Precoder => "precoder",
            ParamGroup::Postcoder => "postcoder",
            ParamGroup::Fr => "f_r",
            ParamGroup::Heads => "heads",
            ParamGroup::Keys => "keys",
            ParamGroup::Unbind => "unbind",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parameter groups an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    Adaptation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: RealTensor,
}

/// Named parameter registry partitioned into groups with a trainable flag each.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    trainable: HashMap<ParamGroup, bool>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            trainable: ParamGroup::ALL.iter().map(|&g| (g, true)).collect(),
        }
    }
}

impl ModelParams {
    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: RealTensor) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "ModelParams::insert" });
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid("ModelParams::insert", format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RealTensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RealTensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&RealTensor> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.get(&group).copied().unwrap_or(true)
    }

    pub fn set_trainable(&mut self, group: ParamGroup, on: bool) {
        self.trainable.insert(group, on);
    }

    /// Full training unfreezes everything; adaptation keeps only the
    /// precoder, postcoder, binding keys and unbinding matrices trainable.
    pub fn set_mode(&mut self, mode: TrainMode) {
        for g in ParamGroup::ALL {
            let on = match mode {
                TrainMode::Full => true,
                TrainMode::Adaptation => ParamGroup::ADAPTABLE.contains(&g),
            };
            self.set_trainable(g, on);
        }
    }

    /// Loads every parameter onto `tape`; frozen groups become constants.
    pub fn bind<'p>(&'p self, tape: &mut Tape) -> BoundParams<'p> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), self.is_trainable(e.group)))
            .collect();
        BoundParams { params: self, vars }
    }

    /// Addresses externally created tape variables (one per entry, in order) by name.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams<'_>> {
        if vars.len() != self.entries.len() {
            return Err(Error::shape("bind_vars", format!("{} vars for {} parameters", vars.len(), self.entries.len())));
        }
        Ok(BoundParams { params: self, vars: vars.to_vec() })
    }

    /// Parameter-space L2 distance between two registries with identical layout.
    pub fn distance(&self, other: &ModelParams, name_prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(name_prefix))
            .filter_map(|e| other.get(&e.name).map(|o| (e, o)))
            .map(|(e, o)| e.value.data().iter().zip(o.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameters placed on a tape, addressable by name.
pub struct BoundParams<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("parameter {name} not registered")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with [`ModelParams::entries`]; `None` for frozen entries.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Option<RealTensor>> {
        self.params
            .entries
            .iter()
            .zip(&self.vars)
            .map(|(e, &v)| self.params.is_trainable(e.group).then(|| grads.wrt(tape, v)))
            .collect()
    }
}

/// Layer dimensions of the desk-scale split architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub n_comp: usize,
    pub in_channels: usize,
    pub image_size: usize,
    /// Feature channels after the disjoint conv; also the binding key length.
    pub key_dim: usize,
    pub ft_pool: usize,
    pub packets: usize,
    pub k_used: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub csi_hidden: usize,
    pub rx_hidden: usize,
    /// Receiver feature width; side of the unbinding matrices.
    pub feature_dim: usize,
    pub n_classes: usize,
    /// Subtracted from every input pixel before the disjoint layers.
    pub input_center: f64,
    /// Add a CSI-derived linear MMSE combiner (with a learned gain) to the
    /// postcoding tensor.
    pub mmse_branch: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_comp: 2,
            in_channels: 1,
            image_size: 8,
            key_dim: 32,
            ft_pool: 2,
            packets: 2,
            k_used: 64,
            n_tx: 2,
            n_rx: 2,
            csi_hidden: 32,
            rx_hidden: 128,
            feature_dim: 64,
            n_classes: 8,
            input_center: 0.5,
            mmse_branch: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_comp", self.n_comp),
            ("in_channels", self.in_channels),
            ("image_size", self.image_size),
            ("ft_pool", self.ft_pool),
            ("packets", self.packets),
            ("k_used", self.k_used),
            ("n_tx", self.n_tx),
            ("n_rx", self.n_rx),
            ("csi_hidden", self.csi_hidden),
            ("rx_hidden", self.rx_hidden),
            ("feature_dim", self.feature_dim),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.input_center.is_finite() {
            return Err(Error::Config("input_center must be finite".into()));
        }
        if self.key_dim < 2 {
            return Err(Error::Config("key_dim must be >= 2".into()));
        }
        if !self.image_size.is_multiple_of(self.ft_pool) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by ft_pool {}",
                self.image_size, self.ft_pool
            )));
        }
        Ok(())
    }

    /// Real length of `t`: two halves (re, im) of `P · K_used · N_t` complex symbols.
    pub fn t_len(&self) -> usize {
        2 * self.packets * self.k_used * self.n_tx
    }

    /// Real length of the postcoder output.
    pub fn postcoded_len(&self) -> usize {
        2 * self.packets * self.k_used * self.n_rx
    }

    fn pooled_len(&self) -> usize {
        let side = self.image_size / self.ft_pool;
        self.key_dim * side * side
    }

    /// Per-subcarrier CSI feature width: interleaved (re, im) of `H_k` plus `σ²_k`.
    pub fn csi_features(&self) -> usize {
        2 * self.n_rx * self.n_tx + 1
    }
}

/// One layer of a [`LayerStack`], referring to its parameters by name.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// 3×3-style conv with "same" zero padding.
    Conv2d { weight: String, bias: String, pad: usize },
    Linear { weight: String, bias: String },
    Relu,
    AvgPool(usize),
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d { weight, bias, pad } => {
                    let y = tape.conv2d(x, p.var(weight)?, *pad)?;
                    tape.add_channel_bias(y, p.var(bias)?)?
                }
                Layer::Linear { weight, bias } => {
                    let y = tape.matmul(x, p.var(weight)?)?;
                    tape.add_bias(y, p.var(bias)?)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::AvgPool(k) => tape.avgpool2d(x, *k)?,
                Layer::Flatten => flatten(tape, x)?,
            };
        }
        Ok(x)
    }
}

/// `[B, ...] -> [B, prod(...)]`.
pub fn flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.is_empty() {
        return Err(Error::shape("flatten", "scalar input"));
    }
    let rest: usize = s[1..].iter().product();
    tape.reshape(x, &[s[0], rest])
}

fn conv_layer(prefix: &str) -> Layer {
    Layer::Conv2d { weight: format!("{prefix}.w"), bias: format!("{prefix}.b"), pad: 1 }
}

fn linear_layer(prefix: &str) -> Layer {
    Layer::Linear { weight: format!("{prefix}.w"), bias: format!("{prefix}.b") }
}

pub fn key_name(i: usize) -> String {
    format!("key.{i}")
}

pub fn unbind_name(i: usize) -> String {
    format!("unbind.{i}")
}

/// Architecture plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SemuxModel {
    pub arch: ArchConfig,
    pub params: ModelParams,
}

fn he(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl SemuxModel {
    /// Random initialization. Disjoint convs start as identical clones; the
    /// precoding/postcoding tensors start at the identity.
    pub fn init<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let a = &arch;
        let mut p = ModelParams::default();
        use ParamGroup::*;

        let pre_w = RealTensor::randn(&[a.key_dim, a.in_channels, 3, 3], he(a.in_channels * 9), rng);
        for i in 0..a.n_comp {
            p.insert(format!("pre.{i}.w"), DisjointPre, pre_w.clone())?;
            p.insert(format!("pre.{i}.b"), DisjointPre, RealTensor::zeros(&[a.key_dim]))?;
        }

        let keys = BindingKeySet::init(a.n_comp, a.key_dim, rng)?;
        for (i, k) in keys.keys.into_iter().enumerate() {
            p.insert(key_name(i), Keys, k)?;
        }

        p.insert("ft.conv.w", Ft, RealTensor::randn(&[a.key_dim, a.key_dim, 3, 3], he(a.key_dim * 9), rng))?;
        p.insert("ft.conv.b", Ft, RealTensor::zeros(&[a.key_dim]))?;
        p.insert("ft.proj.w", Ft, RealTensor::randn(&[a.pooled_len(), a.t_len()], (1.0 / a.pooled_len() as f64).sqrt(), rng))?;
        p.insert("ft.proj.b", Ft, RealTensor::zeros(&[a.t_len()]))?;

        crate::codec::init_precoder(&mut p, a, rng)?;
        crate::codec::init_postcoder(&mut p, a, rng)?;

        p.insert("fr.l1.w", Fr, RealTensor::randn(&[a.postcoded_len(), a.rx_hidden], he(a.postcoded_len()), rng))?;
        p.insert("fr.l1.b", Fr, RealTensor::zeros(&[a.rx_hidden]))?;
        p.insert("fr.l2.w", Fr, RealTensor::randn(&[a.rx_hidden, a.feature_dim], (1.0 / a.rx_hidden as f64).sqrt(), rng))?;
        p.insert("fr.l2.b", Fr, RealTensor::zeros(&[a.feature_dim]))?;

        let unbind = UnbindSet::init(a.n_comp, a.feature_dim, rng)?;
        for (i, m) in unbind.matrices.into_iter().enumerate() {
            p.insert(unbind_name(i), Unbind, m)?;
        }

        for i in 0..a.n_comp {
            p.insert(format!("head.{i}.w"), Heads, RealTensor::randn(&[a.feature_dim, a.n_classes], (1.0 / a.feature_dim as f64).sqrt(), rng))?;
            p.insert(format!("head.{i}.b"), Heads, RealTensor::zeros(&[a.n_classes]))?;
        }
        Ok(Self { arch, params: p })
    }

    pub fn disjoint_stack(&self, i: usize) -> LayerStack {
        LayerStack::new(vec![conv_layer(&format!("pre.{i}"))])
    }

    pub fn ft_stack(&self) -> LayerStack {
        LayerStack::new(vec![
            conv_layer("ft.conv"),
            Layer::Relu,
            Layer::AvgPool(self.arch.ft_pool),
            Layer::Flatten,
            linear_layer("ft.proj"),
        ])
    }

    pub fn fr_stack(&self) -> LayerStack {
        LayerStack::new(vec![linear_layer("fr.l1"), Layer::Relu, linear_layer("fr.l2")])
    }

    pub fn head_stack(&self, i: usize) -> LayerStack {
        LayerStack::new(vec![linear_layer(&format!("head.{i}"))])
    }

    pub fn keys(&self) -> Result<BindingKeySet> {
        let keys = (0..self.arch.n_comp)
            .map(|i| self.params.require(&key_name(i)).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(BindingKeySet { dim: self.arch.key_dim, keys })
    }
}

/// Applies clone `i` of the first conv layer to input `i`.
pub fn disjoint_preprocess(tape: &mut Tape, model: &SemuxModel, p: &BoundParams, inputs: &[Var]) -> Result<Vec<Var>> {
    if inputs.len() != model.arch.n_comp {
        return Err(Error::shape(
            "disjoint_preprocess",
            format!("{} inputs for {} computation channels", inputs.len(), model.arch.n_comp),
        ));
    }
    inputs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = if model.arch.input_center != 0.0 { tape.add_scalar(x, -model.arch.input_center)? } else { x };
            model.disjoint_stack(i).forward(tape, p, x)
        })
        .collect()
}

/// Disjoint preprocessing, binding and superposition.
pub fn bind_inputs(tape: &mut Tape, model: &SemuxModel, p: &BoundParams, inputs: &[Var]) -> Result<Var> {
    let feats = disjoint_preprocess(tape, model, p, inputs)?;
    let bound = feats
        .iter()
        .enumerate()
        .map(|(i, &f)| vsa::bind(tape, f, p.var(&key_name(i))?))
        .collect::<Result<Vec<_>>>()?;
    vsa::superpose(tape, &bound)
}

/// Transmitter joint processing: superposed volume to `t[B, 2·P·K_used·N_t]`.
pub fn f_t(tape: &mut Tape, model: &SemuxModel, p: &BoundParams, bound: Var) -> Result<Var> {
    let t = model.ft_stack().forward(tape, p, bound)?;
    let want = model.arch.t_len();
    let got = tape.shape(t)[1];
    if got != want {
        return Err(Error::shape("f_t", format!("output width {got}, expected {want}")));
    }
    Ok(t)
}

/// Receiver joint processing: postcoded features to `[B, feature_dim]`.
pub fn f_r(tape: &mut Tape, model: &SemuxModel, p: &BoundParams, postcoded: Var) -> Result<Var> {
    let y = model.fr_stack().forward(tape, p, postcoded)?;
    if tape.shape(y).get(1) != Some(&model.arch.feature_dim) {
        return Err(Error::shape(
            "f_r",
            format!("output {:?}, unbind side {}", tape.shape(y), model.arch.feature_dim),
        ));
    }
    Ok(y)
}

/// Unbinds the joint receiver features for every computation channel.
pub fn unbind_all(tape: &mut Tape, model: &SemuxModel, p: &BoundParams, features: Var) -> Result<Vec<Var>> {
    (0..model.arch.n_comp)
        .map(|i| vsa::unbind(tape, features, p.var(&unbind_name(i))?))
        .collect()
}

/// Per-task classifier heads: `N_comp` logits tensors `[B, n_classes]`.
pub fn classify_heads(tape: &mut Tape, model: &SemuxModel, p: &BoundParams, unbound: &[Var]) -> Result<Vec<Var>> {
    if unbound.len() != model.arch.n_comp {
        return Err(Error::shape(
            "classify_heads",
            format!("{} inputs for {} heads", unbound.len(), model.arch.n_comp),
        ));
    }
    unbound
        .iter()
        .enumerate()
        .map(|(i, &u)| model.head_stack(i).forward(tape, p, u))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(n_comp: usize) -> SemuxModel {
        let arch = ArchConfig { n_comp, k_used: 8, rx_hidden: 16, feature_dim: 8, key_dim: 8, ..ArchConfig::default() };
        SemuxModel::init(arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn t_len_matches_subcarrier_budget() {
        let a = ArchConfig { packets: 2, k_used: 800, n_tx: 4, ..ArchConfig::default() };
        assert_eq!(a.t_len(), 12800);
    }

    #[test]
    fn names_unique_and_groups_cover() {
        let m = model(3);
        let mut p = ModelParams::default();
        p.insert("a", ParamGroup::Ft, RealTensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", ParamGroup::Ft, RealTensor::zeros(&[1])).is_err());
        for g in ParamGroup::ALL {
            assert!(m.params.entries().iter().any(|e| e.group == g), "{g} empty");
        }
    }

    #[test]
    fn adaptation_mode_freezes_backbone() {
        let mut m = model(2);
        m.params.set_mode(TrainMode::Adaptation);
        for g in ParamGroup::ALL {
            assert_eq!(m.params.is_trainable(g), ParamGroup::ADAPTABLE.contains(&g));
        }
    }

    #[test]
    fn identical_clones_identical_outputs() {
        let m = model(2);
        let mut t = Tape::new();
        let p = m.params.bind(&mut t);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = RealTensor::randn(&[2, 1, 8, 8], 1.0, &mut rng);
        let xs = [t.constant(x.clone()), t.constant(x)];
        let out = disjoint_preprocess(&mut t, &m, &p, &xs).unwrap();
        assert_eq!(t.value(out[0]), t.value(out[1]));
        assert_eq!(t.shape(out[0]), &[2, 8, 8, 8]);
        assert!(disjoint_preprocess(&mut t, &m, &p, &xs[..1]).is_err());
    }

    #[test]
    fn identity_stack_passes_through() {
        let m = model(1);
        let mut t = Tape::new();
        let p = m.params.bind(&mut t);
        let x = t.constant(RealTensor::from_slice(&[1.0, -2.0]));
        let y = LayerStack::identity().forward(&mut t, &p, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn zero_input_conv_relu_is_zero() {
        let m = model(1);
        let mut t = Tape::new();
        let p = m.params.bind(&mut t);
        let x = t.constant(RealTensor::zeros(&[1, 8, 8, 8]));
        let stack = LayerStack::new(vec![conv_layer("ft.conv"), Layer::Relu]);
        let y = stack.forward(&mut t, &p, x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_heads_give_uniform_loss() {
        let mut m = model(2);
        for i in 0..2 {
            m.params.get_mut(&format!("head.{i}.w")).unwrap().data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let p = m.params.bind(&mut t);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = [t.constant(RealTensor::randn(&[3, 8], 1.0, &mut rng)), t.constant(RealTensor::randn(&[3, 8], 1.0, &mut rng))];
        let logits = classify_heads(&mut t, &m, &p, &u).unwrap();
        let ce = t.softmax_cross_entropy(logits[0], &[0, 5, 7]).unwrap();
        assert!((t.value(ce).item() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn heads_are_independent() {
        let m = model(2);
        let mut perturbed = m.clone();
        perturbed.params.get_mut("head.1.w").unwrap().data_mut()[0] += 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = [RealTensor::randn(&[4, 8], 1.0, &mut rng), RealTensor::randn(&[4, 8], 1.0, &mut rng)];
        let run = |mm: &SemuxModel| {
            let mut t = Tape::new();
            let p = mm.params.bind(&mut t);
            let u: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
            let l = classify_heads(&mut t, mm, &p, &u).unwrap();
            (t.value(l[0]).clone(), t.value(l[1]).clone())
        };
        let (a0, a1) = run(&m);
        let (b0, b1) = run(&perturbed);
        assert_eq!(a0, b0);
        assert_ne!(a1, b1);
    }
}
