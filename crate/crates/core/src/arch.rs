//! Declarative LSTM-SSD layer stacks.
//!
//! An [`ArchSpec`] is a flat, ordered list of layers. Trunk layers form a
//! channel chain (each consumes its predecessor's output); box heads branch
//! off a named source layer. Recurrent layers split the trunk into the
//! sub-networks `g_0 .. g_m`.
//!
//! Two profiles share one builder:
//!
//! * `full` stacks Conv1 through Conv13 and four SSD feature maps;
//! * `toy` stops the backbone at Conv7 (which then plays Conv13's role as
//!   the freeze boundary and default recurrent site) and keeps two feature
//!   maps, for desk-scale training at 64 or 96 pixels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recurrent::{BottleneckForm, GateLayout, RecurrentConfig, RecurrentKind};

/// Which width multiplier a layer's channels follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetPart {
    Base,
    Ssd,
    Lstm,
}

impl FromStr for NetPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(NetPart::Base),
            "ssd" => Ok(NetPart::Ssd),
            "lstm" => Ok(NetPart::Lstm),
            _ => Err(Error::Config(format!("unknown network part `{s}`"))),
        }
    }
}

/// The three width multipliers derived from one `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub base: f64,
    pub ssd: f64,
    pub lstm: f64,
}

impl Alphas {
    pub fn from_alpha(alpha: f64) -> Self {
        Alphas { base: alpha, ssd: 0.5 * alpha, lstm: 0.25 * alpha }
    }

    pub fn get(&self, part: NetPart) -> f64 {
        match part {
            NetPart::Base => self.base,
            NetPart::Ssd => self.ssd,
            NetPart::Lstm => self.lstm,
        }
    }
}

/// `round(base * alpha_part)`, halves rounded up, never below one.
pub fn scale_channels(base: usize, part: NetPart, alpha: f64) -> usize {
    round_channels(base as f64 * Alphas::from_alpha(alpha).get(part))
}

fn round_channels(x: f64) -> usize {
    ((x + 0.5).floor() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    FullConv,
    SeparableConv,
    Recurrent(RecurrentKind),
    BoxHead,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::FullConv => "full_conv",
            LayerKind::SeparableConv => "separable_conv",
            LayerKind::Recurrent(k) => k.as_str(),
            LayerKind::BoxHead => "box_head",
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_conv" => Ok(LayerKind::FullConv),
            "separable_conv" => Ok(LayerKind::SeparableConv),
            "box_head" => Ok(LayerKind::BoxHead),
            other => other.parse().map(LayerKind::Recurrent),
        }
    }
}

/// One layer line of an architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub relu: bool,
    pub bias: bool,
    /// Box heads only: the layer whose output they read.
    pub source: Option<String>,
}

impl LayerSpec {
    fn conv(name: &str, kind: LayerKind, kernel: usize, stride: usize, cin: usize, cout: usize) -> Self {
        LayerSpec {
            name: name.to_owned(),
            kind,
            kernel,
            stride,
            in_channels: cin,
            out_channels: cout,
            relu: true,
            bias: false,
            source: None,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self.kind, LayerKind::Recurrent(_))
    }

    pub fn is_head(&self) -> bool {
        self.kind == LayerKind::BoxHead
    }
}

/// Where recurrent layers go.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    None,
    SingleConv13,
    StackedConv13,
    /// The Conv13 site plus the first `k` feature maps.
    Conv13PlusFmPrefix(usize),
    AllFeatureMaps,
    SingleAfter(String),
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::None => f.write_str("none"),
            Placement::SingleConv13 => f.write_str("single_conv13"),
            Placement::StackedConv13 => f.write_str("stacked_conv13"),
            Placement::Conv13PlusFmPrefix(k) => write!(f, "conv13_plus_fm_prefix({k})"),
            Placement::AllFeatureMaps => f.write_str("all_feature_maps"),
            Placement::SingleAfter(site) => write!(f, "single_after({site})"),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let arg = |prefix: &str| -> Option<&str> {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('(').and_then(|r| r.strip_suffix(')')).or_else(|| r.strip_prefix(':')))
        };
        Ok(match s {
            "none" => Placement::None,
            "single_conv13" => Placement::SingleConv13,
            "stacked_conv13" => Placement::StackedConv13,
            "all_feature_maps" => Placement::AllFeatureMaps,
            _ => {
                if let Some(k) = arg("conv13_plus_fm_prefix") {
                    let k = k.parse().map_err(|_| Error::Config(format!("bad feature-map count in `{s}`")))?;
                    Placement::Conv13PlusFmPrefix(k)
                } else if let Some(site) = arg("single_after") {
                    Placement::SingleAfter(site.to_owned())
                } else {
                    return Err(Error::Config(format!("unknown placement `{s}`")));
                }
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Profile {
    #[default]
    Full,
    Toy,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Toy => "toy",
        }
    }

    fn backbone(self) -> &'static [(usize, usize)] {
        // (stride, base output channels) for Conv2 onwards; Conv1 is a full
        // 3x3 stride-2 convolution to 32 channels.
        const FULL: [(usize, usize); 12] = [
            (1, 64),
            (2, 128),
            (1, 128),
            (2, 256),
            (1, 256),
            (2, 512),
            (1, 512),
            (1, 512),
            (1, 512),
            (1, 512),
            (1, 512),
            (2, 1024),
        ];
        match self {
            Profile::Full => &FULL,
            Profile::Toy => &FULL[..6],
        }
    }

    pub fn feature_maps(self) -> &'static [(usize, usize)] {
        // (base reduce channels, base output channels).
        const FMS: [(usize, usize); 4] = [(256, 512), (128, 256), (128, 256), (64, 128)];
        match self {
            Profile::Full => &FMS,
            Profile::Toy => &FMS[..2],
        }
    }

    /// Total downsampling of the backbone.
    pub fn backbone_stride(self) -> usize {
        1 << (self.backbone().iter().filter(|(s, _)| *s == 2).count() + 1)
    }

    pub fn head_kernel(self) -> usize {
        match self {
            Profile::Full => 1,
            Profile::Toy => 3,
        }
    }

    pub fn anchors_per_cell(self) -> usize {
        match self {
            Profile::Full => 6,
            Profile::Toy => 3,
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "toy" => Ok(Profile::Toy),
            _ => Err(Error::Config(format!("unknown profile `{s}`"))),
        }
    }
}

/// Inputs to [`ArchSpec::build`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub alpha: f64,
    pub resolution: usize,
    pub placement: Placement,
    pub lstm_type: RecurrentKind,
    pub form: BottleneckForm,
    pub layout: GateLayout,
    pub profile: Profile,
    /// Object classes, background excluded.
    pub classes: usize,
    /// Permit recurrent sites inside the backbone (placement ablation only).
    pub allow_early_sites: bool,
    /// Recurrent output channels as a fraction of input channels, except at
    /// FM3/FM4 and for stacked second layers.
    pub lstm_ratio: f64,
}

impl BuildOptions {
    pub fn full(alpha: f64, resolution: usize, placement: Placement) -> Self {
        BuildOptions {
            alpha,
            resolution,
            placement,
            lstm_type: RecurrentKind::BottleneckLstm,
            form: BottleneckForm::InputDepthwise,
            layout: GateLayout::Combined,
            profile: Profile::Full,
            classes: 30,
            allow_early_sites: false,
            lstm_ratio: 0.25,
        }
    }

    pub fn toy(alpha: f64, placement: Placement) -> Self {
        BuildOptions { resolution: 64, profile: Profile::Toy, classes: 3, ..BuildOptions::full(alpha, 64, placement) }
    }
}

/// A complete layer stack plus the options it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub alphas: Alphas,
    pub resolution: usize,
    pub placement: Placement,
    pub lstm_type: RecurrentKind,
    pub form: BottleneckForm,
    pub layout: GateLayout,
    pub profile: Profile,
    pub classes: usize,
    pub anchors_per_cell: usize,
    /// Last backbone layer; it and everything before it freeze in stage 2.
    pub backbone_end: String,
    pub layers: Vec<LayerSpec>,
}

/// Per-layer input and output spatial size (square maps).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Spatial {
    pub input: usize,
    pub output: usize,
}

impl ArchSpec {
    pub fn build(opts: &BuildOptions) -> Result<ArchSpec> {
        if !(opts.alpha > 0.0 && opts.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", opts.alpha)));
        }
        if !(opts.lstm_ratio > 0.0 && opts.lstm_ratio <= 1.0) {
            return Err(Error::Config(format!("lstm ratio must lie in (0, 1], got {}", opts.lstm_ratio)));
        }
        if opts.classes == 0 {
            return Err(Error::Config("at least one object class is required".into()));
        }
        let stride = opts.profile.backbone_stride();
        if opts.resolution == 0 || !opts.resolution.is_multiple_of(stride) {
            return Err(Error::Spec(format!("resolution {} is not divisible by {stride}", opts.resolution)));
        }
        let alphas = Alphas::from_alpha(opts.alpha);
        let scale = |c: usize, part| round_channels(c as f64 * alphas.get(part));
        let backbone = opts.profile.backbone();
        let fms = opts.profile.feature_maps();
        let backbone_end = format!("conv{}", backbone.len() + 1);

        let mut site_names: Vec<String> = vec![backbone_end.clone()];
        site_names.extend((1..=fms.len()).map(|i| format!("fm{i}")));
        let sites = placement_sites(opts, &site_names, &backbone_end)?;

        let mut layers = Vec::new();
        let mut sources = Vec::new();
        let mut chan = scale(32, NetPart::Base);
        layers.push(LayerSpec::conv("conv1", LayerKind::FullConv, 3, 2, 3, chan));
        let maybe_recurrent = |layers: &mut Vec<LayerSpec>, site: &str, chan: &mut usize| {
            let count = sites.iter().filter(|s| s.as_str() == site).count();
            for i in 0..count {
                let m = *chan;
                let n = match opts.lstm_type {
                    RecurrentKind::Averaging => m,
                    _ if i == 0 && !matches!(site, "fm3" | "fm4") => round_channels(opts.lstm_ratio * m as f64),
                    _ => m,
                };
                let name = if i == 0 { format!("{site}_lstm") } else { format!("{site}_lstm{}", i + 1) };
                layers.push(LayerSpec {
                    name,
                    kind: LayerKind::Recurrent(opts.lstm_type),
                    kernel: 3,
                    stride: 1,
                    in_channels: m,
                    out_channels: n,
                    relu: false,
                    bias: false,
                    source: None,
                });
                *chan = n;
            }
        };
        maybe_recurrent(&mut layers, "conv1", &mut chan);
        for (i, &(s, c)) in backbone.iter().enumerate() {
            let name = format!("conv{}", i + 2);
            let out = scale(c, NetPart::Base);
            layers.push(LayerSpec::conv(&name, LayerKind::SeparableConv, 3, s, chan, out));
            chan = out;
            maybe_recurrent(&mut layers, &name, &mut chan);
        }
        sources.push(layers.last().expect("backbone").name.clone());
        for (i, &(r, c)) in fms.iter().enumerate() {
            let name = format!("fm{}", i + 1);
            let reduce = scale(r, NetPart::Ssd);
            let out = scale(c, NetPart::Ssd);
            layers.push(LayerSpec::conv(&format!("{name}_reduce"), LayerKind::FullConv, 1, 1, chan, reduce));
            layers.push(LayerSpec::conv(&name, LayerKind::SeparableConv, 3, 2, reduce, out));
            chan = out;
            maybe_recurrent(&mut layers, &name, &mut chan);
            sources.push(layers.last().expect("feature map").name.clone());
        }

        let per_anchor = opts.classes + 1 + 4;
        let anchors = opts.profile.anchors_per_cell();
        let mut with_heads = Vec::with_capacity(layers.len() + sources.len());
        let mut k = 0;
        for layer in layers {
            let src = sources.iter().position(|s| *s == layer.name);
            let cin = layer.out_channels;
            with_heads.push(layer);
            if let Some(idx) = src {
                debug_assert_eq!(idx, k);
                with_heads.push(LayerSpec {
                    name: format!("box{k}"),
                    kind: LayerKind::BoxHead,
                    kernel: opts.profile.head_kernel(),
                    stride: 1,
                    in_channels: cin,
                    out_channels: anchors * per_anchor,
                    relu: false,
                    bias: true,
                    source: Some(sources[idx].clone()),
                });
                k += 1;
            }
        }

        let spec = ArchSpec {
            alphas,
            resolution: opts.resolution,
            placement: opts.placement.clone(),
            lstm_type: opts.lstm_type,
            form: opts.form,
            layout: opts.layout,
            profile: opts.profile,
            classes: opts.classes,
            anchors_per_cell: anchors,
            backbone_end,
            layers: with_heads,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the channel chain, head sources and spatial arithmetic.
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<&LayerSpec> = None;
        let mut seen = std::collections::HashSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Spec(format!("duplicate layer name `{}`", layer.name)));
            }
            if layer.kernel == 0 || layer.stride == 0 || layer.out_channels == 0 {
                return Err(Error::Spec(format!("degenerate layer `{}`", layer.name)));
            }
            if layer.is_head() {
                let src_name = layer
                    .source
                    .as_deref()
                    .ok_or_else(|| Error::Spec(format!("head `{}` has no source", layer.name)))?;
                let src = self
                    .layers
                    .iter()
                    .take_while(|l| l.name != layer.name)
                    .find(|l| l.name == src_name && !l.is_head())
                    .ok_or_else(|| Error::Spec(format!("head `{}` reads unknown layer `{src_name}`", layer.name)))?;
                if src.out_channels != layer.in_channels {
                    return Err(Error::Spec(format!(
                        "head `{}` expects {} channels but `{src_name}` emits {}",
                        layer.name, layer.in_channels, src.out_channels
                    )));
                }
                let per = self.classes + 5;
                if layer.out_channels % per != 0 {
                    return Err(Error::Spec(format!(
                        "head `{}` width {} is not a multiple of {per}",
                        layer.name, layer.out_channels
                    )));
                }
                continue;
            }
            let expected = prev.map_or(3, |p| p.out_channels);
            if layer.in_channels != expected {
                return Err(Error::Spec(format!(
                    "channel chain broken at `{}`: expects {} inputs, predecessor emits {expected}",
                    layer.name, layer.in_channels
                )));
            }
            if let LayerKind::Recurrent(kind) = layer.kind {
                if layer.stride != 1 {
                    return Err(Error::Spec(format!("recurrent layer `{}` must have stride 1", layer.name)));
                }
                self.recurrent_config(layer).validate().map_err(|e| Error::Spec(e.to_string()))?;
                let _ = kind;
            }
            prev = Some(layer);
        }
        self.spatial()?;
        Ok(())
    }

    /// Spatial sizes per layer, in layer order.
    pub fn spatial(&self) -> Result<Vec<Spatial>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = self.resolution;
        let mut by_name = std::collections::HashMap::new();
        for layer in &self.layers {
            let input = match &layer.source {
                Some(src) => {
                    *by_name.get(src.as_str()).ok_or_else(|| Error::Spec(format!("unresolved source `{src}`")))?
                }
                None => cur,
            };
            if input == 0 {
                return Err(Error::Spec(format!("layer `{}` receives an empty map", layer.name)));
            }
            let output = input.div_ceil(layer.stride);
            if !layer.is_head() {
                cur = output;
            }
            by_name.insert(layer.name.as_str(), output);
            out.push(Spatial { input, output });
        }
        Ok(out)
    }

    pub fn recurrent_config(&self, layer: &LayerSpec) -> RecurrentConfig {
        let LayerKind::Recurrent(kind) = layer.kind else {
            panic!("`{}` is not recurrent", layer.name);
        };
        RecurrentConfig {
            kind,
            input_channels: layer.in_channels,
            output_channels: layer.out_channels,
            kernel: layer.kernel,
            form: self.form,
            layout: self.layout,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn recurrent_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_recurrent())
    }

    pub fn heads(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_head())
    }

    /// Spatial size of each head's input map, in head order.
    pub fn head_maps(&self) -> Result<Vec<usize>> {
        let sp = self.spatial()?;
        Ok(self.layers.iter().zip(&sp).filter(|(l, _)| l.is_head()).map(|(_, s)| s.input).collect())
    }

    /// Layer names frozen during the recurrent training stage.
    pub fn frozen_layers(&self) -> Vec<&str> {
        let end = self.layers.iter().position(|l| l.name == self.backbone_end).unwrap_or(0);
        self.layers[..=end].iter().filter(|l| !l.is_recurrent() && !l.is_head()).map(|l| l.name.as_str()).collect()
    }

    /// Index ranges of the sub-networks `g_0 .. g_m` over the layer list;
    /// each range ends with (and includes) a recurrent layer except the last.
    pub fn partitions(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if l.is_recurrent() {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        out.push(start..self.layers.len());
        out
    }

    /// The same stack with every recurrent layer removed and downstream
    /// input channels rebuilt.
    pub fn without_recurrent(&self) -> Result<ArchSpec> {
        let opts = BuildOptions {
            alpha: self.alphas.base,
            resolution: self.resolution,
            placement: Placement::None,
            lstm_type: self.lstm_type,
            form: self.form,
            layout: self.layout,
            profile: self.profile,
            classes: self.classes,
            allow_early_sites: false,
            lstm_ratio: 0.25,
        };
        ArchSpec::build(&opts)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("tsl-arch 1\n");
        s.push_str(&format!("profile {}\n", self.profile.as_str()));
        s.push_str(&format!("alpha {} {} {}\n", self.alphas.base, self.alphas.ssd, self.alphas.lstm));
        s.push_str(&format!("resolution {}\n", self.resolution));
        s.push_str(&format!("placement {}\n", self.placement));
        s.push_str(&format!("lstm_type {}\n", self.lstm_type));
        s.push_str(&format!("form {}\n", self.form.as_str()));
        s.push_str(&format!("layout {}\n", self.layout.as_str()));
        s.push_str(&format!("classes {}\n", self.classes));
        s.push_str(&format!("anchors {}\n", self.anchors_per_cell));
        s.push_str(&format!("backbone_end {}\n", self.backbone_end));
        for l in &self.layers {
            s.push_str(&format!(
                "layer {} {} k={} s={} {}->{}",
                l.name,
                l.kind.as_str(),
                l.kernel,
                l.stride,
                l.in_channels,
                l.out_channels
            ));
            if l.relu {
                s.push_str(" relu");
            }
            if l.bias {
                s.push_str(" bias");
            }
            if let Some(src) = &l.source {
                s.push_str(&format!(" from={src}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<ArchSpec> {
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, "tsl-arch 1")) => {}
            Some((n, other)) => return Err(perr(n, format!("expected `tsl-arch 1`, found `{other}`"))),
            None => return Err(perr(1, "empty architecture file".into())),
        }
        let mut header = std::collections::HashMap::new();
        let mut layers = Vec::new();
        for (n, line) in lines {
            let mut words = line.split_whitespace();
            let key = words.next().expect("non-empty");
            if key != "layer" {
                header.insert(key.to_owned(), (n, words.collect::<Vec<_>>().join(" ")));
                continue;
            }
            let fields: Vec<&str> = words.collect();
            if fields.len() < 5 {
                return Err(perr(n, "layer line needs name, kind, k=, s= and in->out".into()));
            }
            let num = |s: &str, prefix: &str| -> Result<usize> {
                s.strip_prefix(prefix)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| perr(n, format!("expected {prefix}<int>, found `{s}`")))
            };
            let (cin, cout) = fields[4]
                .split_once("->")
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| perr(n, format!("bad channel spec `{}`", fields[4])))?;
            let mut layer = LayerSpec {
                name: fields[0].to_owned(),
                kind: fields[1].parse().map_err(|e: Error| perr(n, e.to_string()))?,
                kernel: num(fields[2], "k=")?,
                stride: num(fields[3], "s=")?,
                in_channels: cin,
                out_channels: cout,
                relu: false,
                bias: false,
                source: None,
            };
            for flag in &fields[5..] {
                match *flag {
                    "relu" => layer.relu = true,
                    "bias" => layer.bias = true,
                    f if f.starts_with("from=") => layer.source = Some(f[5..].to_owned()),
                    f => return Err(perr(n, format!("unknown layer flag `{f}`"))),
                }
            }
            layers.push(layer);
        }
        let get = |key: &str| -> Result<(usize, &str)> {
            header.get(key).map(|(n, v)| (*n, v.as_str())).ok_or_else(|| perr(0, format!("missing `{key}` line")))
        };
        fn parse_at<V: FromStr>(entry: (usize, &str)) -> Result<V> {
            entry.1.parse().map_err(|_| Error::Parse { line: entry.0, msg: format!("cannot parse `{}`", entry.1) })
        }
        let (an, alpha_line) = get("alpha")?;
        let alpha: Vec<f64> = alpha_line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| perr(an, format!("bad alpha `{v}`"))))
            .collect::<Result<_>>()?;
        if alpha.len() != 3 {
            return Err(perr(an, "alpha line needs base, ssd and lstm values".into()));
        }
        let spec = ArchSpec {
            alphas: Alphas { base: alpha[0], ssd: alpha[1], lstm: alpha[2] },
            resolution: parse_at(get("resolution")?)?,
            placement: parse_at(get("placement")?)?,
            lstm_type: parse_at(get("lstm_type")?)?,
            form: parse_at(get("form")?)?,
            layout: parse_at(get("layout")?)?,
            profile: parse_at(get("profile")?)?,
            classes: parse_at(get("classes")?)?,
            anchors_per_cell: parse_at(get("anchors")?)?,
            backbone_end: get("backbone_end")?.1.to_owned(),
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn placement_sites(opts: &BuildOptions, legal: &[String], backbone_end: &str) -> Result<Vec<String>> {
    let fm_count = legal.len() - 1;
    let sites: Vec<String> = match &opts.placement {
        Placement::None => vec![],
        Placement::SingleConv13 => vec![backbone_end.to_owned()],
        Placement::StackedConv13 => vec![backbone_end.to_owned(); 2],
        Placement::Conv13PlusFmPrefix(k) => {
            if *k > fm_count {
                return Err(Error::Spec(format!(
                    "only {fm_count} feature maps exist, cannot place after the first {k}"
                )));
            }
            legal[..=*k].to_vec()
        }
        Placement::AllFeatureMaps => legal.to_vec(),
        Placement::SingleAfter(site) => {
            let site = if site == "conv13" { backbone_end } else { site.as_str() };
            let last: usize = backbone_end[4..].parse().expect("conv<N>");
            let backbone_site =
                site.strip_prefix("conv").and_then(|n| n.parse::<usize>().ok()).filter(|&n| (1..last).contains(&n));
            if legal.iter().any(|l| l == site) {
                vec![site.to_owned()]
            } else if backbone_site.is_some() {
                if !opts.allow_early_sites {
                    return Err(Error::Spec(format!(
                        "recurrent site `{site}` lies before {backbone_end}; only {backbone_end} and feature maps are legal"
                    )));
                }
                vec![site.to_owned()]
            } else {
                return Err(Error::Spec(format!("unknown recurrent site `{site}`")));
            }
        }
    };
    Ok(sites)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full(alpha: f64, res: usize, placement: Placement) -> ArchSpec {
        ArchSpec::build(&BuildOptions::full(alpha, res, placement)).unwrap()
    }

    #[test]
    fn scale_channels_examples() {
        assert_eq!(scale_channels(1024, NetPart::Lstm, 1.0), 256);
        assert_eq!(scale_channels(1024, NetPart::Lstm, 0.5), 128);
        assert_eq!(scale_channels(513, NetPart::Base, 1.0), 513);
        assert_eq!(scale_channels(3, NetPart::Ssd, 1.0), 2);
        assert_eq!(scale_channels(1, NetPart::Lstm, 0.1), 1);
    }

    #[test]
    fn single_conv13_matches_the_reference_stack() {
        let a = full(1.0, 320, Placement::SingleConv13);
        let lstm: Vec<_> = a.recurrent_layers().collect();
        assert_eq!(lstm.len(), 1);
        assert_eq!((lstm[0].in_channels, lstm[0].out_channels), (1024, 256));
        let sp = a.spatial().unwrap();
        let idx = a.layers.iter().position(|l| l.name == "conv13_lstm").unwrap();
        assert_eq!(sp[idx].input, 10);
        let dims: Vec<_> = ["fm1_reduce", "fm1", "fm2_reduce", "fm2", "fm3_reduce", "fm3", "fm4_reduce", "fm4"]
            .iter()
            .map(|n| {
                let l = a.layer(n).unwrap();
                (l.in_channels, l.out_channels)
            })
            .collect();
        assert_eq!(dims, vec![(256, 128), (128, 256), (256, 64), (64, 128), (128, 64), (64, 128), (128, 32), (32, 64)]);
        assert_eq!(a.head_maps().unwrap(), vec![10, 5, 3, 2, 1]);
    }

    #[test]
    fn all_feature_maps_places_five() {
        let a = full(1.0, 320, Placement::AllFeatureMaps);
        let io: Vec<_> = a.recurrent_layers().map(|l| (l.name.as_str(), l.in_channels, l.out_channels)).collect();
        assert_eq!(
            io,
            vec![
                ("conv13_lstm", 1024, 256),
                ("fm1_lstm", 256, 64),
                ("fm2_lstm", 128, 32),
                ("fm3_lstm", 128, 128),
                ("fm4_lstm", 64, 64)
            ]
        );
        assert_eq!(a.layer("fm2_reduce").unwrap().in_channels, 64);
        assert_eq!(a.partitions().len(), 6);
    }

    #[test]
    fn none_is_the_plain_detector() {
        let a = full(1.0, 320, Placement::None);
        assert_eq!(a.recurrent_layers().count(), 0);
        assert_eq!(a.partitions(), vec![0..a.layers.len()]);
        assert_eq!(full(1.0, 320, Placement::AllFeatureMaps).without_recurrent().unwrap(), a);
    }

    #[test]
    fn stacked_second_layer_keeps_width() {
        let a = full(1.0, 320, Placement::StackedConv13);
        let l2 = a.layer("conv13_lstm2").unwrap();
        assert_eq!((l2.in_channels, l2.out_channels), (256, 256));
    }

    #[test]
    fn early_sites_need_override() {
        let mut o = BuildOptions::full(1.0, 320, Placement::SingleAfter("conv3".into()));
        let e = ArchSpec::build(&o).unwrap_err();
        assert_eq!(e.code(), "E_ARCH");
        o.allow_early_sites = true;
        let a = ArchSpec::build(&o).unwrap();
        let l = a.layer("conv3_lstm").unwrap();
        assert_eq!((l.in_channels, l.out_channels), (128, 32));
        assert_eq!(a.layer("conv4").unwrap().in_channels, 32);
        for bad in ["fm9", "conv40", "pool"] {
            o.placement = Placement::SingleAfter(bad.into());
            assert!(ArchSpec::build(&o).is_err(), "{bad}");
        }
    }

    #[test]
    fn bad_resolution_and_alpha_rejected() {
        assert!(ArchSpec::build(&BuildOptions::full(1.0, 300, Placement::None)).is_err());
        assert!(ArchSpec::build(&BuildOptions::full(0.0, 320, Placement::None)).is_err());
        assert!(ArchSpec::build(&BuildOptions::full(1.5, 320, Placement::None)).is_err());
        assert!(ArchSpec::build(&BuildOptions::full(1.0, 320, Placement::Conv13PlusFmPrefix(5))).is_err());
    }

    #[test]
    fn toy_profile_shape() {
        let a = ArchSpec::build(&BuildOptions::toy(0.25, Placement::SingleConv13)).unwrap();
        assert_eq!(a.backbone_end, "conv7");
        let l = a.layer("conv7_lstm").unwrap();
        assert_eq!((l.in_channels, l.out_channels), (128, 32));
        assert_eq!(a.head_maps().unwrap(), vec![4, 2, 1]);
        assert_eq!(a.frozen_layers(), vec!["conv1", "conv2", "conv3", "conv4", "conv5", "conv6", "conv7"]);
        assert_eq!(a.heads().next().unwrap().out_channels, 3 * 8);
    }

    #[test]
    fn placement_strings_round_trip() {
        for p in [
            Placement::None,
            Placement::SingleConv13,
            Placement::StackedConv13,
            Placement::Conv13PlusFmPrefix(2),
            Placement::AllFeatureMaps,
            Placement::SingleAfter("fm3".into()),
        ] {
            assert_eq!(p.to_string().parse::<Placement>().unwrap(), p);
        }
        assert_eq!("single_after:fm1".parse::<Placement>().unwrap(), Placement::SingleAfter("fm1".into()));
        assert!("everywhere".parse::<Placement>().is_err());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let a = full(0.5, 256, Placement::AllFeatureMaps);
        let text = a.to_text();
        assert!(text.contains("layer conv13_lstm bottleneck_lstm k=3 s=1 512->128\n"));
        assert_eq!(ArchSpec::from_text(&text).unwrap(), a);
        let broken =
            text.replace("layer fm1_reduce full_conv k=1 s=1 128->", "layer fm1_reduce full_conv k=1 s=1 99->");
        assert_eq!(ArchSpec::from_text(&broken).unwrap_err().code(), "E_ARCH");
        assert_eq!(ArchSpec::from_text("nonsense").unwrap_err().code(), "E_PARSE");
    }

    proptest! {
        #[test]
        fn channels_never_zero_and_chain_holds(alpha in 0.05f64..=1.0, fm in 0usize..=4) {
            let a = ArchSpec::build(&BuildOptions::full(alpha, 320, Placement::Conv13PlusFmPrefix(fm))).unwrap();
            prop_assert!(a.layers.iter().all(|l| l.out_channels >= 1));
            prop_assert_eq!(a.recurrent_layers().count(), fm + 1);
            prop_assert_eq!(ArchSpec::from_text(&a.to_text()).unwrap(), a);
        }
    }
}
