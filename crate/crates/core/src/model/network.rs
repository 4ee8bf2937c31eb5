use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::ConvSpec;
use crate::tensor::{Scalar, Tensor};

use super::config::{ModelConfig, OutputMode, Variant};
use super::params::{Init, ModelParams, ParamDecl};

/// Parameter handles on a graph, keyed by parameter name.
pub type ParamVars = IndexMap<String, Var>;

fn lookup(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::NameSetMismatch(format!("parameter `{name}` is missing")))
}

/// Weight-standardised conv followed by group norm (ReLU chosen per call).
#[derive(Debug, Clone)]
struct ConvUnit {
    name: String,
    spec: ConvSpec,
    groups: usize,
    ws_eps: f64,
    norm_eps: f64,
}

impl ConvUnit {
    fn new(name: String, spec: ConvSpec, cfg: &ModelConfig) -> Self {
        Self {
            name,
            spec,
            groups: cfg.groups_for(spec.out_channels),
            ws_eps: cfg.ws_eps,
            norm_eps: cfg.norm_eps,
        }
    }

    fn declare(&self, out: &mut Vec<ParamDecl>) {
        let c = self.spec.out_channels;
        out.push(ParamDecl {
            name: format!("{}.conv.weight", self.name),
            shape: self.spec.weight_shape(),
            init: Init::HeNormal {
                fan_in: self.spec.in_channels * self.spec.kernel_volume(),
            },
        });
        out.push(ParamDecl {
            name: format!("{}.norm.gamma", self.name),
            shape: vec![c],
            init: Init::Ones,
        });
        out.push(ParamDecl {
            name: format!("{}.norm.beta", self.name),
            shape: vec![c],
            init: Init::Zeros,
        });
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var, relu: bool) -> Result<Var> {
        let w = lookup(p, &format!("{}.conv.weight", self.name))?;
        let gamma = lookup(p, &format!("{}.norm.gamma", self.name))?;
        let beta = lookup(p, &format!("{}.norm.beta", self.name))?;
        let w = g.weight_standardize(w, self.ws_eps)?;
        let y = g.conv3d(x, w, None, self.spec)?;
        let y = g.group_norm(y, self.groups, gamma, beta, self.norm_eps)?;
        Ok(if relu { g.relu(y) } else { y })
    }
}

/// Plain 1x1x1 conv with bias producing logits.
#[derive(Debug, Clone)]
struct Head {
    name: String,
    spec: ConvSpec,
}

impl Head {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        out.push(ParamDecl {
            name: format!("{}.weight", self.name),
            shape: self.spec.weight_shape(),
            init: Init::HeNormal {
                fan_in: self.spec.in_channels,
            },
        });
        out.push(ParamDecl {
            name: format!("{}.bias", self.name),
            shape: vec![self.spec.out_channels],
            init: Init::Zeros,
        });
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let w = lookup(p, &format!("{}.weight", self.name))?;
        let b = lookup(p, &format!("{}.bias", self.name))?;
        g.conv3d(x, w, Some(b), self.spec)
    }
}

/// `relu(conv_gn(relu(conv_gn(x))) + skip(x))`.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
    proj: Option<ConvUnit>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, dilation: usize, cfg: &ModelConfig) -> Self {
        let conv = |suffix: &str, cin| {
            ConvUnit::new(
                format!("{name}.{suffix}"),
                ConvSpec::cubic(cin, cout, 3).with_dilation(dilation),
                cfg,
            )
        };
        Self {
            conv1: conv("conv1", cin),
            conv2: conv("conv2", cout),
            proj: (cin != cout)
                .then(|| ConvUnit::new(format!("{name}.proj"), ConvSpec::cubic(cin, cout, 1), cfg)),
        }
    }

    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.conv1.declare(out);
        self.conv2.declare(out);
        if let Some(p) = &self.proj {
            p.declare(out);
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.conv1.apply(g, p, x, true)?;
        let h = self.conv2.apply(g, p, h, false)?;
        let skip = match &self.proj {
            Some(proj) => proj.apply(g, p, x, false)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    entry: ConvUnit,
    blocks: Vec<ResBlock>,
}

impl EncoderStage {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.entry.declare(out);
        for b in &self.blocks {
            b.declare(out);
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let mut h = self.entry.apply(g, p, x, true)?;
        for b in &self.blocks {
            h = b.apply(g, p, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct ResidualPath {
    /// Halves the channels of the previous scale's `O_res`; absent at the deepest scale.
    reduce: Option<ConvUnit>,
    conv_g: ConvUnit,
    conv_out: ConvUnit,
    head: Head,
}

#[derive(Debug, Clone)]
struct ContextModule {
    name: String,
    reduce: ConvUnit,
    fuse: ConvUnit,
    res: Option<ResidualPath>,
    /// Upsampling from this scale to full resolution.
    scale_to_full: usize,
}

impl ContextModule {
    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.reduce.declare(out);
        self.fuse.declare(out);
        if let Some(r) = &self.res {
            if let Some(u) = &r.reduce {
                u.declare(out);
            }
            r.conv_g.declare(out);
            r.conv_out.declare(out);
            r.head.declare(out);
        }
    }
}

/// Layer plan derived from a [`ModelConfig`]; shared by initialisation and forward.
#[derive(Debug, Clone)]
pub(crate) struct Architecture {
    config: ModelConfig,
    encoder: Vec<EncoderStage>,
    bottom: Vec<ResBlock>,
    decoder: Vec<ContextModule>,
    seg_head: Head,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.encoder_channels();
        let mut encoder = vec![EncoderStage {
            entry: ConvUnit::new("enc.stem.conv".into(), ConvSpec::cubic(cfg.in_channels, ch[0], 3), cfg),
            blocks: vec![ResBlock::new("enc.stem.block0", ch[0], ch[0], 1, cfg)],
        }];
        for level in 1..4 {
            let name = format!("enc.down{level}");
            encoder.push(EncoderStage {
                entry: ConvUnit::new(
                    format!("{name}.conv"),
                    ConvSpec::cubic(ch[level - 1], ch[level], 3).with_stride(2),
                    cfg,
                ),
                blocks: (0..2)
                    .map(|b| ResBlock::new(&format!("{name}.block{b}"), ch[level], ch[level], 1, cfg))
                    .collect(),
            });
        }
        let bottom = (0..2)
            .map(|b| {
                ResBlock::new(
                    &format!("enc.bottom.block{b}"),
                    ch[3],
                    ch[3],
                    cfg.dilation_last_stage,
                    cfg,
                )
            })
            .collect();
        let res_ch = cfg.mode.res_channels();
        let decoder = (0..3)
            .rev()
            .map(|level| {
                let name = format!("dec.l{level}");
                let (c, up) = (ch[level], ch[level + 1]);
                let unit = |suffix: &str, spec| ConvUnit::new(format!("{name}.{suffix}"), spec, cfg);
                let res = cfg.variant.has_residual().then(|| ResidualPath {
                    reduce: (level < 2).then(|| unit("res.reduce", ConvSpec::cubic(up, c, 1))),
                    conv_g: unit("res.conv_g", ConvSpec::cubic(c, c, 3)),
                    conv_out: unit("res.conv_out", ConvSpec::cubic(c, c, 3)),
                    head: Head {
                        name: format!("{name}.res.head"),
                        spec: ConvSpec::cubic(c, res_ch, 1),
                    },
                });
                ContextModule {
                    name: name.clone(),
                    reduce: unit("seg.reduce", ConvSpec::cubic(up, c, 1)),
                    fuse: unit("seg.fuse", ConvSpec::cubic(c, c, 3)),
                    res,
                    scale_to_full: 1 << level,
                }
            })
            .collect();
        Ok(Self {
            config: *cfg,
            encoder,
            bottom,
            decoder,
            seg_head: Head {
                name: "seg_head".into(),
                spec: ConvSpec::cubic(ch[0], cfg.mode.seg_channels(), 1),
            },
        })
    }

    pub fn declarations(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        for stage in &self.encoder {
            stage.declare(&mut out);
        }
        for b in &self.bottom {
            b.declare(&mut out);
        }
        for m in &self.decoder {
            m.declare(&mut out);
        }
        self.seg_head.declare(&mut out);
        out
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<ForwardVars> {
        let cfg = &self.config;
        cfg.check_input(g.shape(x))?;
        let mut taps = Vec::new();
        let mut skips = Vec::with_capacity(4);
        let mut h = x;
        for (level, stage) in self.encoder.iter().enumerate() {
            h = stage.apply(g, p, h)?;
            taps.push((format!("enc.l{level}"), h));
            skips.push(h);
        }
        for b in &self.bottom {
            h = b.apply(g, p, h)?;
        }
        taps.push(("bottleneck".to_string(), h));

        let axis = cfg.residual_axis.dim_of(5);
        let mut prev_res: Option<Var> = None;
        let mut res_logits = Vec::new();
        for (m, skip) in self.decoder.iter().zip(skips[..3].iter().rev()) {
            let reduced = m.reduce.apply(g, p, h, true)?;
            let i_seg = g.upsample_trilinear(reduced, [2; 3])?;
            let fused_in = g.add(i_seg, *skip)?;
            let f = m.fuse.apply(g, p, fused_in, true)?;
            taps.push((format!("{}.fuse", m.name), f));
            h = match &m.res {
                None => f,
                Some(r) => {
                    let sf = g.sigmoid(f);
                    let gdiff = g.slicewise_abs_diff(sf, axis)?;
                    let mut o = r.conv_g.apply(g, p, gdiff, true)?;
                    if let (Some(reduce), Some(prev)) = (&r.reduce, prev_res) {
                        let i_res = reduce.apply(g, p, prev, true)?;
                        let i_res = g.upsample_trilinear(i_res, [2; 3])?;
                        o = g.add(o, i_res)?;
                    }
                    let o_res = r.conv_out.apply(g, p, o, true)?;
                    prev_res = Some(o_res);
                    let mut logits = r.head.apply(g, p, o_res)?;
                    if m.scale_to_full > 1 {
                        logits = g.upsample_trilinear(logits, [m.scale_to_full; 3])?;
                    }
                    res_logits.push(logits);
                    if cfg.variant == Variant::Full {
                        let gate = g.sigmoid(o_res);
                        let gate = g.add_scalar(gate, 1.0);
                        g.mul(f, gate)?
                    } else {
                        f
                    }
                }
            };
            taps.push((m.name.clone(), h));
        }
        let seg_logits = self.seg_head.apply(g, p, h)?;
        let seg = match cfg.mode {
            OutputMode::Binary { .. } => g.sigmoid(seg_logits),
            OutputMode::Multiclass { .. } => g.softmax(seg_logits, 1)?,
        };
        // modules run coarse to fine; report final prediction first
        res_logits.reverse();
        let res = res_logits.iter().map(|&l| g.sigmoid(l)).collect();
        Ok(ForwardVars {
            seg_logits,
            seg,
            res_logits,
            res,
            taps,
        })
    }
}

/// Graph handles produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub seg_logits: Var,
    /// Sigmoid (binary) or channel softmax (multiclass) of `seg_logits`.
    pub seg: Var,
    /// Residual logits at full resolution: final prediction, then the two
    /// deep-supervision heads from fine to coarse. Empty for the baseline.
    pub res_logits: Vec<Var>,
    pub res: Vec<Var>,
    /// Named intermediate feature maps: `enc.l{k}`, `bottleneck`, and per
    /// decoder scale `dec.l{k}.fuse` (features before gating) and `dec.l{k}` (module output).
    pub taps: Vec<(String, Var)>,
}

/// Puts every parameter on `g`, as trainable leaves or as constants.
pub fn register_params<T: Scalar>(g: &mut Graph<T>, params: &ModelParams, trainable: bool) -> Result<ParamVars> {
    let mut vars = ParamVars::with_capacity(params.len());
    for (name, t) in params.iter() {
        let t = t.cast::<T>();
        let v = if trainable { g.param(name.clone(), t)? } else { g.constant(t) };
        vars.insert(name.clone(), v);
    }
    Ok(vars)
}

/// Records the network on `g` for input `x` of shape `[N, C, S, H, W]`.
pub fn forward<T: Scalar>(g: &mut Graph<T>, params: &ParamVars, config: &ModelConfig, x: Var) -> Result<ForwardVars> {
    Architecture::new(config)?.forward(g, params, x)
}

/// Forward-pass results copied off the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub seg_logits: Tensor<f32>,
    pub seg: Tensor<f32>,
    pub res_logits: Vec<Tensor<f32>>,
    pub res: Vec<Tensor<f32>>,
    pub taps: Vec<(String, Tensor<f32>)>,
}

/// Inference-only forward pass.
pub fn predict(params: &ModelParams, config: &ModelConfig, x: &Tensor<f32>) -> Result<ForwardOutput> {
    config.check_input(x.shape())?;
    params.check_layout(config)?;
    let mut g = Graph::<f32>::new();
    let vars = register_params(&mut g, params, false)?;
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &vars, config, xv)?;
    Ok(ForwardOutput {
        seg_logits: g.value(out.seg_logits).clone(),
        seg: g.value(out.seg).clone(),
        res_logits: out.res_logits.iter().map(|&v| g.value(v).clone()).collect(),
        res: out.res.iter().map(|&v| g.value(v).clone()).collect(),
        taps: out.taps.iter().map(|(n, v)| (n.clone(), g.value(*v).clone())).collect(),
    })
}
