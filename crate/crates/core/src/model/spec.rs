use serde::{Deserialize, Serialize};

use crate::activation::DyReluConfig;
use crate::error::{Error, Result};
use crate::sharing::{GainScope, Resolved, SharingPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mlp,
    ResnetBasic,
    ResnetBottleneck,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationMode {
    #[default]
    Relu,
    DyreluPhased,
}

/// Architecture description. For residual families `widths` are the
/// per-stage (inner) widths; bottleneck stages output `4·width` channels.
/// For the MLP `widths` are the hidden sizes and `blocks` is unused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub blocks: Vec<usize>,
    pub classes: usize,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    /// Stem conv width; defaults to the first stage width.
    #[serde(default)]
    pub stem: Option<usize>,
    #[serde(default)]
    pub activation: ActivationMode,
    #[serde(default)]
    pub dyrelu: DyReluConfig,
    #[serde(default)]
    pub sharing: SharingPlan,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

impl ArchSpec {
    pub fn mlp(sizes: &[usize], activation: ActivationMode) -> Self {
        let (input, rest) = sizes.split_first().expect("at least input and output sizes");
        let (classes, hidden) = rest.split_last().expect("at least input and output sizes");
        Self {
            family: Family::Mlp,
            widths: hidden.to_vec(),
            blocks: Vec::new(),
            classes: *classes,
            input: [1, 1, *input],
            stem: None,
            activation,
            dyrelu: DyReluConfig::default(),
            sharing: SharingPlan::default(),
        }
    }

    pub fn resnet(family: Family, widths: &[usize], blocks: &[usize], classes: usize, input: [usize; 3]) -> Self {
        Self {
            family,
            widths: widths.to_vec(),
            blocks: blocks.to_vec(),
            classes,
            input,
            stem: None,
            activation: ActivationMode::Relu,
            dyrelu: DyReluConfig::default(),
            sharing: SharingPlan::disabled(blocks.len()),
        }
    }

    /// CIFAR-style ResNet-34: 3×3 stem, no max-pool, basic blocks (3,4,6,3).
    pub fn resnet34_cifar(classes: usize) -> Self {
        let mut s = Self::resnet(Family::ResnetBasic, &[64, 128, 256, 512], &[3, 4, 6, 3], classes, [3, 32, 32]);
        s.stem = Some(64);
        s
    }

    /// CIFAR-style ResNet-50: 3×3 stem, no max-pool, bottleneck blocks
    /// (3,4,6,3), stride on the 3×3 conv.
    pub fn resnet50_cifar(classes: usize) -> Self {
        let mut s = Self::resnet(
            Family::ResnetBottleneck,
            &[64, 128, 256, 512],
            &[3, 4, 6, 3],
            classes,
            [3, 32, 32],
        );
        s.stem = Some(64);
        s
    }

    /// Desk-scale residual net, stages (16,32,64) × (3,3,3) on 32×32 input.
    pub fn desk_resnet(classes: usize) -> Self {
        Self::resnet(Family::ResnetBasic, &[16, 32, 64], &[3, 3, 3], classes, [3, 32, 32])
    }

    /// Resolves a preset name (`resnet34`, `resnet50`, `desk`, `mlp`).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resnet34" => Some(Self::resnet34_cifar(10)),
            "resnet50" => Some(Self::resnet50_cifar(10)),
            "desk" => Some(Self::desk_resnet(10)),
            "mlp" => Some(Self::mlp(&[784, 128, 10], ActivationMode::Relu)),
            _ => None,
        }
    }

    pub fn with_activation(mut self, mode: ActivationMode) -> Self {
        self.activation = mode;
        self
    }

    pub fn with_sharing(mut self, plan: SharingPlan) -> Self {
        self.sharing = plan;
        self
    }

    /// Parses a bare `ArchSpec` table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.input.contains(&0) {
            return Err(Error::Config("classes and input dims must be positive".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.activation == ActivationMode::DyreluPhased {
            self.dyrelu.validate()?;
        }
        match self.family {
            Family::Mlp => {
                if self.sharing.is_enabled() {
                    return Err(Error::Config("weight sharing needs a residual architecture".into()));
                }
            }
            Family::ResnetBasic | Family::ResnetBottleneck => {
                if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
                    return Err(Error::Config(format!(
                        "{} stage widths for {} block counts",
                        self.widths.len(),
                        self.blocks.len()
                    )));
                }
                if self.blocks.contains(&0) {
                    return Err(Error::Config("every stage needs at least one block".into()));
                }
                self.sharing.validate(&self.blocks)?;
            }
        }
        Ok(())
    }
}

/// Role of a dense (never masked) parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenseKind {
    Bias,
    BnScale,
    BnShift,
    /// Sharing gain `γ`.
    Gain,
    /// DyReLU hyper-function parameter; removed after phase-out.
    Hyper,
}

impl DenseKind {
    pub fn code(self) -> u8 {
        match self {
            DenseKind::Bias => 0,
            DenseKind::BnScale => 1,
            DenseKind::BnShift => 2,
            DenseKind::Gain => 3,
            DenseKind::Hyper => 4,
        }
    }
}

/// Where a maskable weight tensor's values live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Storage {
    /// Index into the stored masked parameters.
    Own(usize),
    /// Reuse of weight-layout entry `donor`, scaled by dense gain `gain`.
    Shared { donor: usize, gain: usize },
}

/// One conv or linear weight of the unmodified architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGeom {
    pub name: String,
    /// `[c_out, c_in, k, k]` for convs, `[n_in, n_out]` for linear layers.
    pub shape: Vec<usize>,
    /// Output positions per sample (1 for linear layers).
    pub positions: usize,
    pub storage: Storage,
}

impl WeightGeom {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Dense multiply-accumulates per sample.
    pub fn macs(&self) -> usize {
        self.numel() * self.positions
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGeom {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: DenseKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGeom {
    pub name: String,
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActGeom {
    pub name: String,
    pub channels: usize,
    /// Dense indices of `(fc1.weight, fc1.bias, fc2.weight, fc2.bias)`.
    pub hyper: Option<[usize; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvRef {
    pub weight: usize,
    pub stride: usize,
    pub pad: usize,
    pub bn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearRef {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    pub convs: Vec<ConvRef>,
    /// Activation sites after every conv but the last.
    pub inner_acts: Vec<usize>,
    pub shortcut: Option<ConvRef>,
    /// Activation after the residual add.
    pub out_act: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Mlp {
        layers: Vec<LinearRef>,
        acts: Vec<usize>,
    },
    Resnet {
        stem: ConvRef,
        stem_act: usize,
        stages: Vec<Vec<BlockLayout>>,
        fc: LinearRef,
    },
}

/// Flattened description of every tensor and site of an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub weights: Vec<WeightGeom>,
    /// Weight-layout index of each stored masked parameter.
    pub stored: Vec<usize>,
    pub dense: Vec<DenseGeom>,
    pub bns: Vec<BnGeom>,
    pub acts: Vec<ActGeom>,
    pub body: Body,
}

struct Walker<'a> {
    spec: &'a ArchSpec,
    weights: Vec<WeightGeom>,
    stored: Vec<usize>,
    dense: Vec<DenseGeom>,
    bns: Vec<BnGeom>,
    acts: Vec<ActGeom>,
}

impl Walker<'_> {
    fn dense(&mut self, name: String, shape: Vec<usize>, kind: DenseKind) -> usize {
        self.dense.push(DenseGeom { name, shape, kind });
        self.dense.len() - 1
    }

    fn weight(&mut self, name: String, shape: Vec<usize>, positions: usize, shared: Option<(usize, usize)>) -> usize {
        let storage = match shared {
            Some((donor, gain)) => Storage::Shared { donor, gain },
            None => {
                self.stored.push(self.weights.len());
                Storage::Own(self.stored.len() - 1)
            }
        };
        self.weights.push(WeightGeom {
            name,
            shape,
            positions,
            storage,
        });
        self.weights.len() - 1
    }

    fn bn(&mut self, name: String, channels: usize) -> usize {
        let gamma = self.dense(format!("{name}.weight"), vec![channels], DenseKind::BnScale);
        let beta = self.dense(format!("{name}.bias"), vec![channels], DenseKind::BnShift);
        self.bns.push(BnGeom {
            name,
            channels,
            gamma,
            beta,
        });
        self.bns.len() - 1
    }

    fn act(&mut self, name: String, channels: usize) -> usize {
        let hyper = (self.spec.activation == ActivationMode::DyreluPhased).then(|| {
            let [s1, s2, s3, s4] = self.spec.dyrelu.hyper_shapes(channels);
            [
                self.dense(format!("{name}.hyper.fc1.weight"), s1, DenseKind::Hyper),
                self.dense(format!("{name}.hyper.fc1.bias"), s2, DenseKind::Hyper),
                self.dense(format!("{name}.hyper.fc2.weight"), s3, DenseKind::Hyper),
                self.dense(format!("{name}.hyper.fc2.bias"), s4, DenseKind::Hyper),
            ]
        });
        self.acts.push(ActGeom { name, channels, hyper });
        self.acts.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        hw: (usize, usize),
        shared: Option<(usize, usize)>,
        bn_name: String,
    ) -> (ConvRef, (usize, usize)) {
        let pad = k / 2;
        let out = ((hw.0 + 2 * pad - k) / stride + 1, (hw.1 + 2 * pad - k) / stride + 1);
        let weight = self.weight(name.to_string(), vec![c_out, c_in, k, k], out.0 * out.1, shared);
        let bn = self.bn(bn_name, c_out);
        (ConvRef { weight, stride, pad, bn }, out)
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> LinearRef {
        let weight = self.weight(format!("{name}.weight"), vec![n_in, n_out], 1, None);
        let bias = self.dense(format!("{name}.bias"), vec![n_out], DenseKind::Bias);
        LinearRef { weight, bias }
    }

    fn mlp(&mut self) -> Body {
        let mut sizes = vec![self.spec.input_len()];
        sizes.extend(&self.spec.widths);
        sizes.push(self.spec.classes);
        let mut layers = Vec::new();
        let mut acts = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            layers.push(self.linear(&format!("fc{}", i + 1), w[0], w[1]));
            if i + 2 < sizes.len() {
                acts.push(self.act(format!("act{}", i + 1), w[1]));
            }
        }
        Body::Mlp { layers, acts }
    }

    fn resnet(&mut self) -> Body {
        let spec = self.spec;
        let bottleneck = spec.family == Family::ResnetBottleneck;
        let expansion = if bottleneck { BOTTLENECK_EXPANSION } else { 1 };
        let [c0, h0, w0] = spec.input;
        let stem_w = spec.stem.unwrap_or(spec.widths[0]);
        let (stem, mut hw) = self.conv("stem.conv", c0, stem_w, 3, 1, (h0, w0), None, "stem.bn".into());
        let stem_act = self.act("stem.act".into(), stem_w);
        let mut c_in = stem_w;
        let mut stages = Vec::new();
        for (s, (&width, &l)) in spec.widths.iter().zip(&spec.blocks).enumerate() {
            let c_out = width * expansion;
            let mut blocks = Vec::new();
            // Weight-layout indices of the donor block's main convs.
            let mut donor_convs: Vec<usize> = Vec::new();
            for b in 1..=l {
                let prefix = format!("stage{}.block{}", s + 1, b);
                let stride = if s > 0 && b == 1 { 2 } else { 1 };
                let resolved = spec.sharing.resolve(s, b);
                let kernels: Vec<(usize, usize, usize, usize)> = if bottleneck {
                    vec![(c_in, width, 1, 1), (width, width, 3, stride), (width, c_out, 1, 1)]
                } else {
                    vec![(c_in, c_out, 3, stride), (c_out, c_out, 3, 1)]
                };
                let block_gain = match (resolved, spec.sharing.gains) {
                    (Resolved::Donor { .. }, GainScope::PerBlock) => {
                        Some(self.dense(format!("{prefix}.gain"), vec![1], DenseKind::Gain))
                    }
                    _ => None,
                };
                let mut convs = Vec::new();
                let mut inner_acts = Vec::new();
                let mut cur = hw;
                for (j, &(ci, co, k, st)) in kernels.iter().enumerate() {
                    let name = format!("{prefix}.conv{}", j + 1);
                    let shared = match resolved {
                        Resolved::Own => None,
                        Resolved::Donor { .. } => {
                            let gain = block_gain.unwrap_or_else(|| {
                                self.dense(format!("{name}.gain"), vec![1], DenseKind::Gain)
                            });
                            Some((donor_convs[j], gain))
                        }
                    };
                    let (conv, out) = self.conv(&name, ci, co, k, st, cur, shared, format!("{prefix}.bn{}", j + 1));
                    cur = out;
                    convs.push(conv);
                    if j + 1 < kernels.len() {
                        inner_acts.push(self.act(format!("{prefix}.act{}", j + 1), co));
                    }
                }
                let shortcut = (stride != 1 || c_in != c_out).then(|| {
                    self.conv(
                        &format!("{prefix}.shortcut.conv"),
                        c_in,
                        c_out,
                        1,
                        stride,
                        hw,
                        None,
                        format!("{prefix}.shortcut.bn"),
                    )
                    .0
                });
                if spec.sharing.donor(s) == Some(b) {
                    donor_convs = convs.iter().map(|c| c.weight).collect();
                }
                let out_act = self.act(format!("{prefix}.act_out"), c_out);
                blocks.push(BlockLayout {
                    convs,
                    inner_acts,
                    shortcut,
                    out_act,
                });
                hw = cur;
                c_in = c_out;
            }
            stages.push(blocks);
        }
        let fc = self.linear("fc", c_in, spec.classes);
        Body::Resnet {
            stem,
            stem_act,
            stages,
            fc,
        }
    }
}

impl Layout {
    pub fn new(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut w = Walker {
            spec,
            weights: Vec::new(),
            stored: Vec::new(),
            dense: Vec::new(),
            bns: Vec::new(),
            acts: Vec::new(),
        };
        let body = match spec.family {
            Family::Mlp => w.mlp(),
            Family::ResnetBasic | Family::ResnetBottleneck => w.resnet(),
        };
        Ok(Self {
            weights: w.weights,
            stored: w.stored,
            dense: w.dense,
            bns: w.bns,
            acts: w.acts,
            body,
        })
    }

    /// Resolves a weight entry to its stored masked-parameter index.
    pub fn stored_index(&self, weight: usize) -> usize {
        match self.weights[weight].storage {
            Storage::Own(m) => m,
            Storage::Shared { donor, .. } => self.stored_index(donor),
        }
    }

    /// Shapes of the stored masked parameters, in storage order.
    pub fn stored_shapes(&self) -> Vec<Vec<usize>> {
        self.stored.iter().map(|&w| self.weights[w].shape.clone()).collect()
    }

    /// `‖θ‖₀` of the unmodified architecture over maskable tensors.
    pub fn maskable(&self) -> usize {
        self.weights.iter().map(WeightGeom::numel).sum()
    }

    /// `N_s`: dense size of the tensors replaced by donor references.
    pub fn replaced(&self) -> usize {
        self.weights
            .iter()
            .filter(|w| matches!(w.storage, Storage::Shared { .. }))
            .map(WeightGeom::numel)
            .sum()
    }

    fn dense_count(&self, pred: impl Fn(DenseKind) -> bool) -> usize {
        self.dense
            .iter()
            .filter(|d| pred(d.kind))
            .map(|d| d.shape.iter().product::<usize>())
            .sum()
    }

    /// Learnable scalars of the unmodified architecture (weights, biases,
    /// BatchNorm), excluding sharing gains and DyReLU hyper-functions.
    pub fn theoretical(&self) -> usize {
        self.maskable() + self.dense_count(|k| matches!(k, DenseKind::Bias | DenseKind::BnScale | DenseKind::BnShift))
    }

    pub fn gain_count(&self) -> usize {
        self.dense_count(|k| k == DenseKind::Gain)
    }

    pub fn hyper_count(&self) -> usize {
        self.dense_count(|k| k == DenseKind::Hyper)
    }

    /// Physically stored architecture parameters: `N − N_s` plus gains.
    pub fn stored_count(&self) -> usize {
        self.theoretical() - self.replaced() + self.gain_count()
    }
}
