//! Piecewise-linear classifier model.
//!
//! A [`Network`] is an ordered list of affine layers; every hidden layer is
//! followed by a ReLU and the output layer applies no activation. All
//! arithmetic is in `f64`. Networks are immutable after construction and safe
//! to share across threads.

use ndarray::{Array1, Array2};
use serde_json::Value;
use std::io::Read;

use crate::{Error, Result};

/// One affine layer `z' = W z + b`, optionally followed by a ReLU.
#[derive(Debug, Clone)]
pub struct Layer {
    /// Weight matrix, `out_dim x in_dim`.
    pub weights: Array2<f64>,
    /// Bias vector, `out_dim`.
    pub bias: Array1<f64>,
    /// Whether a component-wise ReLU follows the affine map.
    pub has_relu: bool,
    /// True when the layer was lowered from a convolution description.
    pub from_conv: bool,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// A feed-forward ReLU classifier.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
}

/// Per-layer values of a feed-forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Pre-activation vectors `z'_i`, one per layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation vectors `z_i`; equals `pre` for the output layer.
    pub post: Vec<Vec<f64>>,
}

impl Trace {
    /// Final class scores `z_L`.
    pub fn scores(&self) -> &[f64] {
        self.post.last().expect("trace has at least one layer")
    }
}

/// Boolean vector recording which ReLUs are strictly positive for an input,
/// ordered layer-major over the hidden layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    pub bits: Vec<bool>,
}

impl ActivationPattern {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl Network {
    /// Builds a network from explicit layers, checking all structural invariants.
    pub fn new(layers: Vec<Layer>, input_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network has no layers".into()));
        }
        if input_dim == 0 {
            return Err(Error::InvalidInput("input_dim must be positive".into()));
        }
        let mut prev = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != prev {
                return Err(Error::Dimension(format!(
                    "layer {} expects input of size {}, got {}",
                    i,
                    layer.in_dim(),
                    prev
                )));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Dimension(format!(
                    "layer {} bias length {} does not match {} rows",
                    i,
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if layer.weights.iter().any(|w| !w.is_finite())
                || layer.bias.iter().any(|b| !b.is_finite())
            {
                return Err(Error::NonFinite(format!("layer {} has a non-finite entry", i)));
            }
            let is_last = i + 1 == layers.len();
            if is_last && layer.has_relu {
                return Err(Error::InvalidInput("output layer must not apply ReLU".into()));
            }
            if !is_last && !layer.has_relu {
                return Err(Error::InvalidInput(format!(
                    "hidden layer {} must apply ReLU",
                    i
                )));
            }
            prev = layer.out_dim();
        }
        if prev < 2 {
            return Err(Error::InvalidInput(format!(
                "output dimension must be at least 2, got {}",
                prev
            )));
        }
        Ok(Self { layers, input_dim })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Total number of layers, including the output layer.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    /// Total number of ReLU neurons across hidden layers.
    pub fn relu_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.has_relu)
            .map(|l| l.out_dim())
            .sum()
    }

    /// Index (1-based) of the last layer lowered from a convolution, if any.
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .enumerate()
            .rev()
            .find(|(_, l)| l.from_conv)
            .map(|(i, _)| i + 1)
    }

    /// Runs a feed-forward pass, recording every pre- and post-activation vector.
    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "input has length {}, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut z = Array1::from(x.to_vec());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let zp = layer.weights.dot(&z) + &layer.bias;
            let za = if layer.has_relu {
                zp.mapv(|v| v.max(0.0))
            } else {
                zp.clone()
            };
            pre.push(zp.to_vec());
            post.push(za.to_vec());
            z = za;
        }
        Ok(Trace { pre, post })
    }

    /// Predicted class: argmax of the output scores, ties broken by the lowest
    /// class index.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        let trace = self.forward(x)?;
        Ok(argmax(trace.scores()))
    }

    /// Activation pattern of `x`: bit `j` is set iff the `j`-th ReLU's
    /// pre-activation is strictly positive.
    pub fn activation_pattern(&self, x: &[f64]) -> Result<ActivationPattern> {
        let trace = self.forward(x)?;
        let mut bits = Vec::with_capacity(self.relu_count());
        for (layer, zp) in self.layers.iter().zip(trace.pre.iter()) {
            if layer.has_relu {
                bits.extend(zp.iter().map(|&v| v > 0.0));
            }
        }
        Ok(ActivationPattern { bits })
    }
}

/// Argmax with ties broken by the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Parses a network document.
///
/// The document is JSON of the form
/// `{"input_dim": n, "layers": [...]}` where each layer is either a dense
/// layer `{"weights": [[...]], "bias": [...], "relu": bool}` (row-major
/// weights) or a convolution `{"conv": {...}, "relu": bool}`. Convolutions are
/// lowered to equivalent dense affine layers at load time; max-pooling is
/// rejected.
pub fn load_network<R: Read>(mut source: R) -> Result<Network> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Parse("top-level value must be an object".into()))?;
    let input_dim = obj
        .get("input_dim")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Parse("missing or invalid \"input_dim\"".into()))?
        as usize;
    let raw_layers = obj
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("missing or invalid \"layers\" array".into()))?;

    let mut layers = Vec::with_capacity(raw_layers.len());
    let mut prev = input_dim;
    for (i, raw) in raw_layers.iter().enumerate() {
        let layer_obj = raw
            .as_object()
            .ok_or_else(|| Error::Parse(format!("layer {} is not an object", i)))?;
        if layer_obj.contains_key("maxpool") {
            return Err(Error::Unsupported(format!(
                "layer {}: max-pooling layers are not supported",
                i
            )));
        }
        let relu = layer_obj
            .get("relu")
            .and_then(Value::as_bool)
            .ok_or_else(|| Error::Parse(format!("layer {}: missing boolean \"relu\"", i)))?;
        let layer = if layer_obj.contains_key("conv") {
            lower_conv(i, &raw["conv"], relu, prev)?
        } else if layer_obj.contains_key("weights") {
            parse_dense(i, layer_obj, relu)?
        } else {
            return Err(Error::Parse(format!(
                "layer {}: expected \"weights\" or \"conv\"",
                i
            )));
        };
        prev = layer.out_dim();
        layers.push(layer);
    }
    Network::new(layers, input_dim)
}

fn parse_dense(idx: usize, obj: &serde_json::Map<String, Value>, relu: bool) -> Result<Layer> {
    let rows: Vec<Vec<f64>> = serde_json::from_value(obj["weights"].clone())
        .map_err(|e| Error::Parse(format!("layer {}: bad weights: {}", idx, e)))?;
    let bias: Vec<f64> = serde_json::from_value(
        obj.get("bias")
            .cloned()
            .ok_or_else(|| Error::Parse(format!("layer {}: missing bias", idx)))?,
    )
    .map_err(|e| Error::Parse(format!("layer {}: bad bias: {}", idx, e)))?;
    if rows.is_empty() {
        return Err(Error::Parse(format!("layer {}: empty weight matrix", idx)));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!(
            "layer {}: ragged weight matrix",
            idx
        )));
    }
    let nrows = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let weights = Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::Dimension(format!("layer {}: {}", idx, e)))?;
    Ok(Layer {
        weights,
        bias: Array1::from(bias),
        has_relu: relu,
        from_conv: false,
    })
}

/// Expands a convolution into the equivalent dense affine layer.
///
/// Spatial layout is channels-last: input index `(y, x, ch)` flattens to
/// `(y * width + x) * channels + ch`, and the output uses the same layout with
/// `out_channels`.
fn lower_conv(idx: usize, conv: &Value, relu: bool, expected_in: usize) -> Result<Layer> {
    #[derive(serde::Deserialize)]
    struct RawConv {
        kernel: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        input_shape: [usize; 3],
        #[serde(default = "one_pair")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
    }
    fn one_pair() -> [usize; 2] {
        [1, 1]
    }

    let raw: RawConv = serde_json::from_value(conv.clone())
        .map_err(|e| Error::Parse(format!("layer {}: bad conv description: {}", idx, e)))?;
    let [h, w, c] = raw.input_shape;
    if h * w * c != expected_in {
        return Err(Error::Dimension(format!(
            "layer {}: conv input shape {}x{}x{} does not match incoming size {}",
            idx, h, w, c, expected_in
        )));
    }
    let out_c = raw.kernel.len();
    if out_c == 0 || raw.bias.len() != out_c {
        return Err(Error::Dimension(format!(
            "layer {}: conv bias length {} does not match {} output channels",
            idx,
            raw.bias.len(),
            out_c
        )));
    }
    let in_c = raw.kernel[0].len();
    if in_c != c {
        return Err(Error::Dimension(format!(
            "layer {}: kernel expects {} input channels, input has {}",
            idx, in_c, c
        )));
    }
    let kh = raw.kernel[0][0].len();
    let kw = raw.kernel[0][0].first().map_or(0, |r| r.len());
    if kh == 0 || kw == 0 {
        return Err(Error::Parse(format!("layer {}: empty kernel", idx)));
    }
    for oc in &raw.kernel {
        if oc.len() != in_c
            || oc.iter().any(|ic| {
                ic.len() != kh || ic.iter().any(|row| row.len() != kw)
            })
        {
            return Err(Error::Dimension(format!("layer {}: ragged kernel", idx)));
        }
    }
    let [sh, sw] = raw.stride;
    let [ph, pw] = raw.padding;
    if sh == 0 || sw == 0 {
        return Err(Error::InvalidInput(format!("layer {}: zero stride", idx)));
    }
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::Dimension(format!(
            "layer {}: kernel larger than padded input",
            idx
        )));
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let out_dim = oh * ow * out_c;
    let in_dim = h * w * c;

    let mut weights = Array2::<f64>::zeros((out_dim, in_dim));
    let mut bias = Array1::<f64>::zeros(out_dim);
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..out_c {
                let row = (oy * ow + ox) * out_c + oc;
                bias[row] = raw.bias[oc];
                for ic in 0..in_c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue; // zero padding
                            }
                            let col = (iy as usize * w + ix as usize) * c + ic;
                            weights[(row, col)] += raw.kernel[oc][ic][ky][kx];
                        }
                    }
                }
            }
        }
    }
    Ok(Layer {
        weights,
        bias,
        has_relu: relu,
        from_conv: true,
    })
}
