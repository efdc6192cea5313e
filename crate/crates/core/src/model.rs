//! Shared convolutional backbone with an object head and an auxiliary head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorgrad::{ParamId, ParamSet, Parameter, Scalar, Tape, Tensor, Var};

use crate::datasets::Batch;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxTask {
    Jigsaw,
    Rotation,
}

impl fmt::Display for AuxTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxTask::Jigsaw => "jigsaw",
            AuxTask::Rotation => "rotation",
        })
    }
}

impl FromStr for AuxTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jigsaw" => Ok(AuxTask::Jigsaw),
            "rotation" => Ok(AuxTask::Rotation),
            other => invalid(format!("unknown auxiliary task {:?}", other)),
        }
    }
}

/// One conv + ReLU layer, optionally followed by non-overlapping max-pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Pool window (and stride); 0 disables pooling.
    pub pool: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, pool: usize) -> Self {
        Self { out_channels, kernel: 3, stride: 1, padding: 1, pool }
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}k{}s{}p{}m{}", self.out_channels, self.kernel, self.stride, self.padding, self.pool)
    }
}

impl FromStr for ConvSpec {
    type Err = Error;

    /// `c<out>` followed by optional `k<kernel>`, `s<stride>`, `p<padding>`,
    /// `m<pool>` fields; omitted fields default to k3 s1 p1 m0.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed conv layer {:?}", s));
        let mut spec = ConvSpec::new(0, 0);
        let mut seen_c = false;
        let mut rest = s.trim();
        while let Some(tag) = rest.chars().next() {
            let digits = rest[1..].find(|c: char| !c.is_ascii_digit()).map_or(rest.len(), |i| i + 1);
            let value: usize = rest[1..digits].parse().map_err(|_| bad())?;
            match tag {
                'c' => {
                    spec.out_channels = value;
                    seen_c = true;
                }
                'k' => spec.kernel = value,
                's' => spec.stride = value,
                'p' => spec.padding = value,
                'm' => spec.pool = value,
                _ => return Err(bad()),
            }
            rest = &rest[digits..];
        }
        if !seen_c {
            return Err(bad());
        }
        Ok(spec)
    }
}

pub fn format_conv_stack(convs: &[ConvSpec]) -> String {
    convs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_conv_stack(s: &str) -> Result<Vec<ConvSpec>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub in_channels: usize,
    /// Expected input height and width.
    pub input_hw: (usize, usize),
    pub convs: Vec<ConvSpec>,
    /// Global average pooling before the heads; otherwise the maps are flattened.
    pub gap: bool,
    pub classes: usize,
    pub aux_classes: usize,
    pub aux_task: AuxTask,
}

impl ModelSpec {
    /// conv32-pool2, conv64-pool2, conv128, GAP on 30×30 RGB input.
    pub fn default_for(classes: usize, aux_task: AuxTask, aux_classes: usize) -> Self {
        Self {
            in_channels: 3,
            input_hw: (30, 30),
            convs: vec![ConvSpec::new(32, 2), ConvSpec::new(64, 2), ConvSpec::new(128, 0)],
            gap: true,
            classes,
            aux_classes,
            aux_task,
        }
    }

    /// Shape `(C, H, W)` of the final feature maps.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize)> {
        let (mut c, (mut h, mut w)) = (self.in_channels, self.input_hw);
        for (i, l) in self.convs.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return invalid(format!("conv layer {} has a zero size field: {}", i, l));
            }
            if h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel {
                return invalid(format!("conv layer {} kernel exceeds its {}x{} input", i, h, w));
            }
            h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
            w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
            if l.pool > 0 {
                if h < l.pool || w < l.pool {
                    return invalid(format!("pool after conv layer {} exceeds its {}x{} input", i, h, w));
                }
                h /= l.pool;
                w /= l.pool;
            }
            c = l.out_channels;
        }
        Ok((c, h, w))
    }

    /// Width of the vector the heads consume.
    pub fn head_input(&self) -> Result<usize> {
        let (c, h, w) = self.feature_dims()?;
        Ok(if self.gap { c } else { c * h * w })
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return invalid("model needs at least one conv layer");
        }
        if self.in_channels == 0 {
            return invalid("model needs at least one input channel");
        }
        if self.classes < 2 || self.aux_classes < 2 {
            return invalid(format!(
                "need at least 2 object and 2 auxiliary classes, got {} and {}",
                self.classes, self.aux_classes
            ));
        }
        if self.aux_task == AuxTask::Rotation && self.aux_classes != 4 {
            return invalid("the rotation head has exactly 4 classes");
        }
        self.feature_dims().map(|_| ())
    }
}

/// Backbone plus heads. Weight sharing is structural: both heads read the
/// same feature vector on every forward pass.
#[derive(Clone, Debug)]
pub struct Model<F = f32> {
    pub spec: ModelSpec,
    pub params: ParamSet<F>,
    conv: Vec<(ParamId, ParamId)>,
    class_head: (ParamId, ParamId),
    aux_head: Option<(ParamId, ParamId)>,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub class_logits: Var,
    pub aux_logits: Option<Var>,
    /// Final feature maps, `N×C×H×W`, before pooling.
    pub features: Var,
}

fn conv_names(i: usize) -> (String, String) {
    (format!("conv{}.weight", i), format!("conv{}.bias", i))
}

const CLASS_HEAD: (&str, &str) = ("class.weight", "class.bias");
const AUX_HEAD: (&str, &str) = ("aux.weight", "aux.bias");

/// Fan-in scaled uniform initialization drawn from one seeded stream:
/// conv layers first, then the object head, then the auxiliary head.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model<f32>> {
    init(spec, seed, true)
}

impl Model<f32> {
    /// A model with no auxiliary head whose shared parameters match
    /// `build_model(spec, seed)` exactly.
    pub fn single_head(spec: &ModelSpec, seed: u64) -> Result<Self> {
        init(spec, seed, false)
    }
}

fn init(spec: &ModelSpec, seed: u64, with_aux: bool) -> Result<Model<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut in_c = spec.in_channels;
    for (i, l) in spec.convs.iter().enumerate() {
        let fan_in = in_c * l.kernel * l.kernel;
        let (wn, bn) = conv_names(i);
        params.push(Parameter::uniform(wn, vec![l.out_channels, in_c, l.kernel, l.kernel], (6.0 / fan_in as f64).sqrt(), &mut rng))?;
        params.push(Parameter::new(bn, Tensor::zeros(vec![l.out_channels])))?;
        in_c = l.out_channels;
    }
    let d = spec.head_input()?;
    let bound = 1.0 / (d as f64).sqrt();
    params.push(Parameter::uniform(CLASS_HEAD.0, vec![d, spec.classes], bound, &mut rng))?;
    params.push(Parameter::new(CLASS_HEAD.1, Tensor::zeros(vec![spec.classes])))?;
    if with_aux {
        params.push(Parameter::uniform(AUX_HEAD.0, vec![d, spec.aux_classes], bound, &mut rng))?;
        params.push(Parameter::new(AUX_HEAD.1, Tensor::zeros(vec![spec.aux_classes])))?;
    }
    Model::from_params(spec.clone(), params)
}

impl<F: Scalar> Model<F> {
    /// Bind a parameter set to `spec`, checking every expected name and shape.
    pub fn from_params(spec: ModelSpec, params: ParamSet<F>) -> Result<Self> {
        spec.validate()?;
        let lookup = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Load(format!("parameter {:?} missing", name)))?;
            let got = params.get(id).value.shape();
            if got != shape {
                return Err(Error::Load(format!("parameter {:?} has shape {:?}, expected {:?}", name, got, shape)));
            }
            Ok(id)
        };
        let mut conv = Vec::with_capacity(spec.convs.len());
        let mut in_c = spec.in_channels;
        for (i, l) in spec.convs.iter().enumerate() {
            let (wn, bn) = conv_names(i);
            conv.push((
                lookup(&wn, &[l.out_channels, in_c, l.kernel, l.kernel])?,
                lookup(&bn, &[l.out_channels])?,
            ));
            in_c = l.out_channels;
        }
        let d = spec.head_input()?;
        let class_head = (lookup(CLASS_HEAD.0, &[d, spec.classes])?, lookup(CLASS_HEAD.1, &[spec.classes])?);
        let aux_head = match params.find(AUX_HEAD.0) {
            Some(_) => Some((lookup(AUX_HEAD.0, &[d, spec.aux_classes])?, lookup(AUX_HEAD.1, &[spec.aux_classes])?)),
            None => None,
        };
        let expected = 2 * conv.len() + 2 + if aux_head.is_some() { 2 } else { 0 };
        if params.len() != expected {
            return Err(Error::Load(format!("{} parameters present, {} expected", params.len(), expected)));
        }
        Ok(Self { spec, params, conv, class_head, aux_head })
    }

    pub fn has_aux_head(&self) -> bool {
        self.aux_head.is_some()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            conv: self.conv.clone(),
            class_head: self.class_head,
            aux_head: self.aux_head,
        }
    }

    /// Parameter ids of the shared backbone and the object head.
    pub fn shared_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.conv.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend([self.class_head.0, self.class_head.1]);
        ids
    }

    pub fn aux_ids(&self) -> Vec<ParamId> {
        self.aux_head.map(|(w, b)| vec![w, b]).unwrap_or_default()
    }

    pub fn class_head_weight(&self) -> &Tensor<F> {
        &self.params.get(self.class_head.0).value
    }

    /// One backbone pass feeding both heads. `images` must be `N×C×H×W`
    /// matching the spec's input.
    pub fn forward(&self, tape: &mut Tape<F>, images: Var) -> Result<Outputs> {
        let xs = tape.value(images).shape().to_vec();
        let want = [self.spec.in_channels, self.spec.input_hw.0, self.spec.input_hw.1];
        if xs.len() != 4 || xs[1..] != want {
            return invalid(format!("input shape {:?} does not match N×{:?}", xs, want));
        }
        let mut h = images;
        for (l, &(w, b)) in self.spec.convs.iter().zip(&self.conv) {
            let (wv, bv) = (tape.param(&self.params, w), tape.param(&self.params, b));
            h = tape.conv2d(h, wv, Some(bv), l.stride, l.padding)?;
            h = tape.relu(h);
            if l.pool > 0 {
                h = tape.maxpool2d(h, l.pool, l.pool)?;
            }
        }
        let features = h;
        let pooled = if self.spec.gap {
            tape.global_avg_pool(features)?
        } else {
            let d = self.spec.head_input()?;
            tape.reshape(features, vec![xs[0], d])?
        };
        let head = |tape: &mut Tape<F>, (w, b): (ParamId, ParamId)| {
            let (wv, bv) = (tape.param(&self.params, w), tape.param(&self.params, b));
            tape.affine(pooled, wv, bv)
        };
        let class_logits = head(tape, self.class_head)?;
        let aux_logits = match self.aux_head {
            Some(ids) => Some(head(tape, ids)?),
            None => None,
        };
        Ok(Outputs { class_logits, aux_logits, features })
    }

    /// Forward pass on concrete data, returning owned tensors.
    pub fn infer(&self, images: Tensor<F>) -> Result<Inference<F>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = self.forward(&mut tape, x)?;
        Ok(Inference {
            class_logits: tape.value(out.class_logits).clone(),
            aux_logits: out.aux_logits.map(|v| tape.value(v).clone()),
            features: tape.value(out.features).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Inference<F> {
    pub class_logits: Tensor<F>,
    pub aux_logits: Option<Tensor<F>>,
    pub features: Tensor<F>,
}

/// Loss handles for one source batch.
#[derive(Clone, Copy, Debug)]
pub struct JigenLoss {
    pub total: Var,
    pub l_c: Var,
    pub l_p: Option<Var>,
}

fn check_rows<F: Scalar>(tape: &Tape<F>, logits: Var, batch: &Batch) -> Result<()> {
    let rows = tape.value(logits).shape()[0];
    let n = batch.class_labels.len();
    if rows != n || batch.jigsaw_labels.len() != n || batch.ordered_mask.len() != n {
        return invalid(format!("{} output rows for a batch of {}", rows, n));
    }
    Ok(())
}

/// `total = L_c + α·L_p`: `L_c` is cross-entropy over ordered rows only and
/// `L_p` is auxiliary cross-entropy over every row.
///
/// With `α = 0` the auxiliary loss is still evaluated for logging but is
/// left out of `total`, so no gradient reaches the auxiliary head.
pub fn jigen_loss<F: Scalar>(tape: &mut Tape<F>, out: &Outputs, batch: &Batch, alpha: f64) -> Result<JigenLoss> {
    if !(alpha >= 0.0) {
        return invalid(format!("jigsaw weight {} must be non-negative", alpha));
    }
    check_rows(tape, out.class_logits, batch)?;
    let l_c = tape.softmax_cross_entropy(out.class_logits, &batch.class_labels, &batch.mask_weights())?;
    let l_p = match out.aux_logits {
        Some(z) => Some(tape.softmax_cross_entropy(z, &batch.jigsaw_labels, &vec![1.0; batch.jigsaw_labels.len()])?),
        None if alpha > 0.0 => return invalid("a positive auxiliary weight needs an auxiliary head"),
        None => None,
    };
    let total = match l_p {
        Some(lp) if alpha > 0.0 => {
            let weighted = tape.scale(lp, F::from_f64(alpha));
            tape.add(l_c, weighted)?
        }
        _ => l_c,
    };
    Ok(JigenLoss { total, l_c, l_p })
}

/// Loss handles for one unlabeled target batch.
#[derive(Clone, Copy, Debug)]
pub struct DaLoss {
    /// `None` when both weights are zero: the batch contributes no gradient.
    pub total: Option<Var>,
    /// Mean class-prediction entropy over ordered rows, if there are any.
    pub entropy: Option<Var>,
    pub l_p: Option<Var>,
}

/// `η·H(class | ordered rows) + α_t·CE(aux, all rows)`. Class labels are never read.
pub fn da_loss<F: Scalar>(
    tape: &mut Tape<F>,
    out: &Outputs,
    batch: &Batch,
    alpha_t: f64,
    eta: f64,
) -> Result<DaLoss> {
    if !(alpha_t >= 0.0 && eta >= 0.0) {
        return invalid(format!("target weights must be non-negative, got α_t={} η={}", alpha_t, eta));
    }
    check_rows(tape, out.class_logits, batch)?;
    let entropy = if batch.ordered_count() > 0 {
        Some(tape.masked_entropy(out.class_logits, &batch.mask_weights())?)
    } else {
        None
    };
    let l_p = match out.aux_logits {
        Some(z) => Some(tape.softmax_cross_entropy(z, &batch.jigsaw_labels, &vec![1.0; batch.jigsaw_labels.len()])?),
        None if alpha_t > 0.0 => return invalid("a positive auxiliary weight needs an auxiliary head"),
        None => None,
    };
    let mut total = None;
    for (term, weight) in [(entropy, eta), (l_p, alpha_t)] {
        if let (Some(v), true) = (term, weight > 0.0) {
            let scaled = tape.scale(v, F::from_f64(weight));
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
    }
    Ok(DaLoss { total, entropy, l_p })
}
