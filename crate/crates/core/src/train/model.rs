//! Quantized models and their conversion to and from containers.

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Network};
use crate::quantcore::{
    dequantize, quantize_nonuniform, quantize_uniform, QuantizationPoints, QuantizedVector,
    UniformScheme,
};
use crate::rng::ElementRng;
use crate::sizing::{model_size_report, Container, Entry, EntryData, SizeReport};

/// One dense layer whose weight vector is quantized; the bias stays at full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: QuantizedVector,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    /// The network computing with the dequantized weights `Q(w)`.
    pub fn to_network(&self) -> Result<Network> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(Dense {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: dequantize(&l.weights)?,
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Network { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn size_report(&self, f: u32) -> Result<SizeReport> {
        let names: Vec<String> = (0..self.layers.len()).map(|i| format!("layer{i}")).collect();
        let layers: Vec<(&str, &QuantizedVector)> = names
            .iter()
            .zip(&self.layers)
            .map(|(n, l)| (n.as_str(), &l.weights))
            .collect();
        let biases = self.layers.iter().map(|l| l.bias.len() as u64).sum();
        model_size_report(&layers, biases, f)
    }

    /// Number of quantization levels used per layer.
    pub fn levels_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weights.scheme.index_count()).collect()
    }

    pub fn to_container(&self) -> Container {
        let mut entries = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let act = l.activation.name();
            entries.push(Entry {
                name: format!("{i}.{act}.weight"),
                data: EntryData::Quantized(l.weights.clone()),
            });
            entries.push(Entry {
                name: format!("{i}.{act}.bias"),
                data: EntryData::Raw(l.bias.clone()),
            });
        }
        Container { entries }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let layers = read_layers(c)?
            .into_iter()
            .map(|(act, w, bias)| match w {
                EntryData::Quantized(qv) => {
                    let outputs = bias.len();
                    let inputs = shape_inputs(qv.len(), outputs)?;
                    Ok(QuantizedLayer { inputs, outputs, weights: qv.clone(), bias: bias.clone(), activation: act })
                }
                EntryData::Raw(_) => Err(Error::Corruption("expected quantized weights".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

fn shape_inputs(n: usize, outputs: usize) -> Result<usize> {
    if outputs == 0 || n % outputs != 0 || n == 0 {
        return Err(Error::Corruption(format!(
            "{n} weights cannot form a layer with {outputs} outputs"
        )));
    }
    Ok(n / outputs)
}

/// Pair up `<i>.<activation>.weight` / `.bias` entries in layer order.
fn read_layers(c: &Container) -> Result<Vec<(Activation, &EntryData, &Vec<f64>)>> {
    if c.entries.len() % 2 != 0 || c.entries.is_empty() {
        return Err(Error::Corruption("model container needs weight/bias pairs".into()));
    }
    c.entries
        .chunks(2)
        .enumerate()
        .map(|(i, pair)| {
            let (w, b) = (&pair[0], &pair[1]);
            let parts: Vec<&str> = w.name.split('.').collect();
            let ok = parts.len() == 3
                && parts[0] == i.to_string()
                && parts[2] == "weight"
                && b.name == format!("{}.{}.bias", parts[0], parts[1]);
            if !ok {
                return Err(Error::Corruption(format!(
                    "unexpected entry names '{}', '{}' for layer {i}",
                    w.name, b.name
                )));
            }
            let act = Activation::parse(parts[1])
                .ok_or_else(|| Error::Corruption(format!("unknown activation '{}'", parts[1])))?;
            let EntryData::Raw(bias) = &b.data else {
                return Err(Error::Corruption(format!("bias of layer {i} is not raw")));
            };
            Ok((act, &w.data, bias))
        })
        .collect()
}

/// Full-precision checkpoint: every tensor as a raw f64 entry.
pub fn network_to_container(net: &Network) -> Container {
    let mut entries = Vec::with_capacity(2 * net.layers.len());
    for (i, l) in net.layers.iter().enumerate() {
        let act = l.activation.name();
        entries.push(Entry { name: format!("{i}.{act}.weight"), data: EntryData::Raw(l.weights.clone()) });
        entries.push(Entry { name: format!("{i}.{act}.bias"), data: EntryData::Raw(l.bias.clone()) });
    }
    Container { entries }
}

pub fn network_from_container(c: &Container) -> Result<Network> {
    let layers = read_layers(c)?
        .into_iter()
        .map(|(act, w, bias)| match w {
            EntryData::Raw(w) => {
                let outputs = bias.len();
                let inputs = shape_inputs(w.len(), outputs)?;
                Ok(Dense { inputs, outputs, weights: w.clone(), bias: bias.clone(), activation: act })
            }
            EntryData::Quantized(_) => Err(Error::Corruption("expected raw weights".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    let net = Network { layers };
    net.validate().map_err(|e| Error::Corruption(e.to_string()))?;
    Ok(net)
}

/// Uniform quantization of every weight vector; stochastic schemes draw from
/// the stream `(seed, layer, step)`.
pub fn quantize_network_uniform(
    net: &Network,
    scheme: UniformScheme,
    bucket_size: usize,
    seed: u64,
    step: u64,
) -> Result<QuantizedModel> {
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut rng = ElementRng::new(seed, i as u64, step);
            Ok(QuantizedLayer {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: quantize_uniform(&l.weights, bucket_size, scheme, Some(&mut rng))?,
                bias: l.bias.clone(),
                activation: l.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel { layers })
}

/// Non-uniform quantization with one point set per layer.
pub fn quantize_network_nonuniform(
    net: &Network,
    points: &[QuantizationPoints],
    bucket_size: usize,
) -> Result<QuantizedModel> {
    if points.len() != net.layers.len() {
        return Err(Error::Argument(format!(
            "{} point sets for {} layers",
            points.len(),
            net.layers.len()
        )));
    }
    let layers = net
        .layers
        .iter()
        .zip(points)
        .map(|(l, p)| {
            Ok(QuantizedLayer {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: quantize_nonuniform(&l.weights, bucket_size, p)?,
                bias: l.bias.clone(),
                activation: l.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel { layers })
}

/// CRC32 over all parameters' bit patterns.
pub fn parameter_checksum(net: &Network) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for l in &net.layers {
        for v in l.weights.iter().chain(&l.bias) {
            h.update(&v.to_bits().to_le_bytes());
        }
    }
    h.finalize()
}
