//! Two fully convolutional streams over shared kernels with per-modality
//! batch normalization.
//!
//! Layout: nine groups of `{conv 3x3, BN, ReLU} x convs_per_group`, 2x2 max
//! pooling after the groups listed in `pool_after`, one transposed
//! convolution group restoring the input resolution, a 1x1 classifier and a
//! channel softmax.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{bail, Error, Result};
use crate::nn::{self, BatchNormParams, Conv2dParams, ModalityId, Mode};
use crate::params::{Bound, ParamStore};
use crate::rng::{DetRng, SeedTree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture description, serialized as `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub classes: usize,
    pub group_channels: Vec<usize>,
    pub convs_per_group: usize,
    pub kernel: usize,
    /// 1-based group indices followed by 2x2 max pooling.
    pub pool_after: Vec<usize>,
    pub deconv_channels: usize,
    pub deconv_kernel: usize,
    pub deconv_padding: usize,
    /// 1-based group after which dropout is applied in train mode.
    pub dropout_after: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            classes: 4,
            group_channels: vec![8, 8, 16, 16, 32, 32, 32, 16, 16],
            convs_per_group: 2,
            kernel: 3,
            pool_after: vec![2, 4, 6],
            deconv_channels: 16,
            deconv_kernel: 16,
            deconv_padding: 4,
            dropout_after: Some(7),
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: bad integer {s:?}")))
        })
        .collect()
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: bad integer {v:?}")))
}

impl ModelSpec {
    pub fn groups(&self) -> usize {
        self.group_channels.len()
    }

    /// Total downsampling between input and bottleneck.
    pub fn pool_factor(&self) -> usize {
        1 << self.pool_after.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.classes < 2 {
            bail!(Config, "model needs >= 1 input channel and >= 2 classes");
        }
        if self.group_channels.is_empty() || self.group_channels.contains(&0) {
            bail!(Config, "group channel list {:?} invalid", self.group_channels);
        }
        if self.convs_per_group == 0 {
            bail!(Config, "convs_per_group must be positive");
        }
        if self.kernel.is_multiple_of(2) {
            bail!(Config, "kernel extent {} must be odd", self.kernel);
        }
        let mut sorted = self.pool_after.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.pool_after || self.pool_after.iter().any(|&g| g == 0 || g > self.groups()) {
            bail!(Config, "pool sites {:?} must be increasing group indices", self.pool_after);
        }
        if let Some(d) = self.dropout_after {
            if d == 0 || d > self.groups() {
                bail!(Config, "dropout site {d} outside 1..={}", self.groups());
            }
        }
        let f = self.pool_factor();
        if self.deconv_kernel.checked_sub(2 * self.deconv_padding) != Some(f) {
            bail!(
                Config,
                "deconvolution kernel {} / padding {} does not restore a x{f} upsampling",
                self.deconv_kernel,
                self.deconv_padding
            );
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "in_channels={}\nclasses={}\ngroup_channels={}\nconvs_per_group={}\nkernel={}\npool_after={}\ndeconv_channels={}\ndeconv_kernel={}\ndeconv_padding={}\ndropout_after={}\n",
            self.in_channels,
            self.classes,
            join(&self.group_channels),
            self.convs_per_group,
            self.kernel,
            join(&self.pool_after),
            self.deconv_channels,
            self.deconv_kernel,
            self.deconv_padding,
            self.dropout_after.map_or("none".to_string(), |d| d.to_string()),
        )
    }

    /// Applies one `key=value` pair; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "in_channels" => self.in_channels = parse_usize(key, value)?,
            "classes" => self.classes = parse_usize(key, value)?,
            "group_channels" => self.group_channels = parse_list(key, value)?,
            "convs_per_group" => self.convs_per_group = parse_usize(key, value)?,
            "kernel" => self.kernel = parse_usize(key, value)?,
            "pool_after" => self.pool_after = parse_list(key, value)?,
            "deconv_channels" => self.deconv_channels = parse_usize(key, value)?,
            "deconv_kernel" => self.deconv_kernel = parse_usize(key, value)?,
            "deconv_padding" => self.deconv_padding = parse_usize(key, value)?,
            "dropout_after" => {
                self.dropout_after = match value.trim() {
                    "none" => None,
                    v => Some(parse_usize(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("model spec line without '=': {line:?}")))?;
            if !spec.set(k.trim(), v)? {
                bail!(Format, "unknown model spec key {k:?}");
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Ablation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Two independent networks.
    Single,
    /// One network, batch norm included, for both modalities.
    Joint,
    /// Shared convolutions, per-modality batch norm.
    Msbn,
    /// MSBN plus a class-agnostic affinity consistency loss.
    Affinity,
    /// MSBN plus the class-specific affinity consistency loss.
    Csa,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Self::Single, Self::Joint, Self::Msbn, Self::Affinity, Self::Csa];

    pub fn sharing(self) -> Sharing {
        match self {
            Setting::Single => Sharing::Independent,
            Setting::Joint => Sharing::Full,
            Setting::Msbn | Setting::Affinity | Setting::Csa => Sharing::ConvOnly,
        }
    }

    pub fn uses_affinity(self) -> bool {
        matches!(self, Setting::Affinity | Setting::Csa)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Single => "Single",
            Setting::Joint => "Joint",
            Setting::Msbn => "MSBN",
            Setting::Affinity => "Affinity",
            Setting::Csa => "CSA",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Self::Single),
            "joint" => Ok(Self::Joint),
            "msbn" => Ok(Self::Msbn),
            "affinity" => Ok(Self::Affinity),
            "csa" => Ok(Self::Csa),
            _ => bail!(Config, "unknown setting {s:?} (Single|Joint|MSBN|Affinity|CSA)"),
        }
    }
}

/// Which parameters the two streams have in common.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sharing {
    Independent,
    Full,
    ConvOnly,
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sharing::Independent => "independent",
            Sharing::Full => "full",
            Sharing::ConvOnly => "conv-only",
        })
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "full" => Ok(Self::Full),
            "conv-only" => Ok(Self::ConvOnly),
            _ => bail!(Format, "unknown sharing {s:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnSettings {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BnSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct StreamLayout {
    /// Per group, per conv layer.
    convs: Vec<Vec<(Conv2dParams, BatchNormParams)>>,
    deconv: (Conv2dParams, BatchNormParams),
    head: Conv2dParams,
}

/// Output of one stream's forward pass.
pub struct ForwardArtifacts<'t, T> {
    /// Class probabilities `[n,C,h,w]`.
    pub probs: Var<'t, T>,
    /// Post-activation output of every group, keyed by 1-based group index.
    pub tapped_features: BTreeMap<usize, Var<'t, T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualStreamModel<T> {
    spec: ModelSpec,
    sharing: Sharing,
    bn: BnSettings,
    store: ParamStore<T>,
    streams: [StreamLayout; 2],
}

fn build_stream<T: Scalar>(
    spec: &ModelSpec,
    store: &mut ParamStore<T>,
    conv_prefix: &str,
    bn_prefix: &str,
    bn: BnSettings,
    rng: &mut DetRng,
    shared_convs: Option<&StreamLayout>,
) -> Result<StreamLayout> {
    let mut convs = Vec::with_capacity(spec.groups());
    let mut in_ch = spec.in_channels;
    for (g, &ch) in spec.group_channels.iter().enumerate() {
        let mut layers = Vec::with_capacity(spec.convs_per_group);
        for j in 0..spec.convs_per_group {
            let conv = match shared_convs {
                Some(s) => s.convs[g][j].0,
                None => Conv2dParams::init(
                    store,
                    &format!("{conv_prefix}g{}.c{}", g + 1, j + 1),
                    in_ch,
                    ch,
                    spec.kernel,
                    1,
                    spec.kernel / 2,
                    rng,
                )?,
            };
            let norm = BatchNormParams::init(
                store,
                &format!("{bn_prefix}g{}.c{}", g + 1, j + 1),
                ch,
                bn.epsilon,
                bn.momentum,
            )?;
            layers.push((conv, norm));
            in_ch = ch;
        }
        convs.push(layers);
    }
    let f = spec.pool_factor();
    let deconv = match shared_convs {
        Some(s) => s.deconv.0,
        None => Conv2dParams::init_transposed(
            store,
            &format!("{conv_prefix}deconv"),
            in_ch,
            spec.deconv_channels,
            spec.deconv_kernel,
            f,
            spec.deconv_padding,
            rng,
        )?,
    };
    let deconv_bn = BatchNormParams::init(
        store,
        &format!("{bn_prefix}deconv"),
        spec.deconv_channels,
        bn.epsilon,
        bn.momentum,
    )?;
    let head = match shared_convs {
        Some(s) => s.head,
        None => Conv2dParams::init(
            store,
            &format!("{conv_prefix}head"),
            spec.deconv_channels,
            spec.classes,
            1,
            1,
            0,
            rng,
        )?,
    };
    Ok(StreamLayout {
        convs,
        deconv: (deconv, deconv_bn),
        head,
    })
}

impl<T: Scalar> DualStreamModel<T> {
    /// Builds both streams. Shared kernels are drawn from the `init/0`
    /// substream; independent second-stream kernels from `init/1`.
    pub fn new(spec: ModelSpec, sharing: Sharing, bn: BnSettings, seeds: &SeedTree) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng0 = seeds.stream("init", 0);
        let streams = match sharing {
            Sharing::Independent => {
                let s0 = build_stream(&spec, &mut store, "s0.", "s0.bn.", bn, &mut rng0, None)?;
                let mut rng1 = seeds.stream("init", 1);
                let s1 = build_stream(&spec, &mut store, "s1.", "s1.bn.", bn, &mut rng1, None)?;
                [s0, s1]
            }
            Sharing::Full => {
                let s0 = build_stream(&spec, &mut store, "", "bn.", bn, &mut rng0, None)?;
                [s0.clone(), s0]
            }
            Sharing::ConvOnly => {
                let s0 = build_stream(&spec, &mut store, "", "bn0.", bn, &mut rng0, None)?;
                let s1 = build_stream(&spec, &mut store, "", "bn1.", bn, &mut rng0, Some(&s0))?;
                [s0, s1]
            }
        };
        Ok(Self {
            spec,
            sharing,
            bn,
            store,
            streams,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn sharing(&self) -> Sharing {
        self.sharing
    }

    pub fn bn_settings(&self) -> BnSettings {
        self.bn
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Names of every parameter (trainable or buffer) one stream reads.
    pub fn stream_param_names(&self, m: ModalityId) -> Vec<String> {
        let s = &self.streams[m.index()];
        let mut ids = Vec::new();
        let push_bn = |b: &BatchNormParams, ids: &mut Vec<_>| {
            ids.extend([b.gamma, b.beta, b.running_mean, b.running_var]);
        };
        for group in &s.convs {
            for (c, b) in group {
                ids.extend([c.kernels, c.bias]);
                push_bn(b, &mut ids);
            }
        }
        ids.extend([s.deconv.0.kernels, s.deconv.0.bias]);
        push_bn(&s.deconv.1, &mut ids);
        ids.extend([s.head.kernels, s.head.bias]);
        ids.into_iter().map(|id| self.store.get(id).name.clone()).collect()
    }

    /// Kernel tensor of conv layer `layer` (0-based) of group `group`
    /// (1-based) as seen by stream `m`.
    pub fn conv_kernels(&self, m: ModalityId, group: usize, layer: usize) -> &Tensor<T> {
        self.store.tensor(self.streams[m.index()].convs[group - 1][layer].0.kernels)
    }

    /// Batch-norm parameter names of stream `m`.
    pub fn bn_param_names(&self, m: ModalityId) -> Vec<String> {
        self.stream_param_names(m)
            .into_iter()
            .filter(|n| n.contains("bn"))
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.store.bind(tape)
    }

    /// Runs stream `m` on `x` (`[n,in_channels,h,w]`). `h` and `w` must be
    /// divisible by the pooling factor. Train mode updates that stream's
    /// running batch-norm moments and applies dropout at rate `dropout`.
    pub fn forward<'t>(
        &mut self,
        bound: &Bound<'t, T>,
        x: Var<'t, T>,
        m: ModalityId,
        mode: Mode,
        dropout: f64,
        rng: &mut DetRng,
    ) -> Result<ForwardArtifacts<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            bail!(
                Dimension,
                "model input must be [n,{},h,w], got {shape:?}",
                self.spec.in_channels
            );
        }
        let f = self.spec.pool_factor();
        if !shape[2].is_multiple_of(f) || !shape[3].is_multiple_of(f) {
            bail!(Dimension, "input extent {}x{} not divisible by {f}", shape[2], shape[3]);
        }
        let layout = &self.streams[m.index()];
        let store = &mut self.store;
        let mut h = x;
        let mut taps = BTreeMap::new();
        for (g, layers) in layout.convs.iter().enumerate() {
            let group = g + 1;
            for (conv, bn) in layers {
                h = conv.forward(h, bound)?;
                h = bn.forward(h, store, bound, mode)?;
                h = nn::relu(h);
            }
            taps.insert(group, h);
            if self.spec.dropout_after == Some(group) {
                h = nn::dropout(h, dropout, mode, rng)?;
            }
            if self.spec.pool_after.contains(&group) {
                h = h.max_pool2d(2)?;
            }
        }
        let (dc, dbn) = &layout.deconv;
        h = dc.forward_transposed(h, bound)?;
        h = dbn.forward(h, store, bound, mode)?;
        h = nn::relu(h);
        let logits = layout.head.forward(h, bound)?;
        let probs = nn::softmax(logits)?;
        Ok(ForwardArtifacts {
            probs,
            tapped_features: taps,
        })
    }

    /// Eval-mode class probabilities for `x`, as a plain tensor.
    pub fn predict(&mut self, x: &Tensor<T>, m: ModalityId) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let xv = tape.constant(x.clone());
        let mut unused = SeedTree::new(0).stream("unused", 0);
        let out = self.forward(&bound, xv, m, Mode::Eval, 0.0, &mut unused)?;
        Ok(out.probs.value())
    }

    /// Writes the checkpoint: a text header (magic, model spec, named
    /// parameter manifest with byte offsets and shapes) terminated by a
    /// `[data]` line, followed by one `CSAT` record per parameter.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = String::from("CSA-CHECKPOINT 1\n[model]\n");
        header.push_str(&self.spec.to_text());
        header.push_str(&format!(
            "sharing={}\nbn_epsilon={:?}\nbn_momentum={:?}\n[manifest]\n",
            self.sharing, self.bn.epsilon, self.bn.momentum
        ));
        let mut blob = Vec::new();
        for (_, p) in self.store.iter() {
            header.push_str(&format!(
                "{} {} {} {}\n",
                p.name,
                blob.len(),
                p.tensor.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
                u8::from(p.trainable),
            ));
            p.tensor.write_record(&mut blob)?;
        }
        header.push_str("[data]\n");
        w.write_all(header.as_bytes())?;
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        let mut next = |line: &mut String| -> Result<String> {
            line.clear();
            if r.read_line(line)? == 0 {
                bail!(Format, "checkpoint ends inside its header");
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next(&mut line)? != "CSA-CHECKPOINT 1" {
            bail!(Format, "not a checkpoint (bad magic line)");
        }
        if next(&mut line)? != "[model]" {
            bail!(Format, "missing [model] section");
        }
        let mut spec_text = String::new();
        let mut sharing = None;
        let mut bn = BnSettings::default();
        loop {
            let l = next(&mut line)?;
            if l == "[manifest]" {
                break;
            }
            match l.split_once('=') {
                Some(("sharing", v)) => sharing = Some(v.parse::<Sharing>()?),
                Some(("bn_epsilon", v)) => {
                    bn.epsilon = v.parse().map_err(|_| Error::Format(format!("bn_epsilon {v:?}")))?
                }
                Some(("bn_momentum", v)) => {
                    bn.momentum = v.parse().map_err(|_| Error::Format(format!("bn_momentum {v:?}")))?
                }
                _ => {
                    spec_text.push_str(&l);
                    spec_text.push('\n');
                }
            }
        }
        let spec = ModelSpec::from_text(&spec_text)?;
        let sharing = sharing.ok_or_else(|| Error::Format("checkpoint lacks sharing".into()))?;
        let mut manifest = Vec::new();
        loop {
            let l = next(&mut line)?;
            if l == "[data]" {
                break;
            }
            let parts: Vec<&str> = l.split(' ').collect();
            if parts.len() != 4 {
                bail!(Format, "bad manifest line {l:?}");
            }
            let offset: usize = parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad offset in {l:?}")))?;
            let shape = parse_list("shape", parts[2]).map_err(|e| Error::Format(e.to_string()))?;
            manifest.push((parts[0].to_string(), offset, shape));
        }
        let mut model = Self::new(spec, sharing, bn, &SeedTree::new(0))?;
        if manifest.len() != model.store.len() {
            bail!(
                Format,
                "checkpoint has {} parameters, architecture has {}",
                manifest.len(),
                model.store.len()
            );
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        for (name, offset, shape) in manifest {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            let slice = blob
                .get(offset..)
                .ok_or_else(|| Error::Format(format!("offset {offset} of {name} past end")))?;
            let mut cursor = slice;
            let t = Tensor::<T>::read_record(&mut cursor)?;
            if t.shape() != shape.as_slice() || t.shape() != model.store.tensor(id).shape() {
                bail!(
                    Format,
                    "parameter {name}: stored shape {:?}, manifest {shape:?}, expected {:?}",
                    t.shape(),
                    model.store.tensor(id).shape()
                );
            }
            model.store.get_mut(id).tensor = t;
        }
        Ok(model)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::load(&mut r)
    }
}
