//! Self-describing binary model container.
//!
//! Layout: an 8-byte magic, a little-endian u32 header length, a JSON
//! header describing the layout and every layer's hyperparameters, then the
//! parameter tensors as consecutive little-endian f64 blocks in layer
//! order. The header is the schema; block sizes are implied by it, so a
//! mismatch anywhere is detected and reported with the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::convops::Padding;
use crate::error::{Error, Result};
use crate::flows::{
    ActNormLayer, ConvExpLayer, FlatCoupling, FlowModel, GclExpLayer, GraphCoupling,
    ImageCoupling, ImageMask, Layer, Mix1x1Layer, ModelKind,
};
use crate::rng::Rng;
use crate::sylvester::SylvesterLayer;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CVXPFLW1";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: KindHeader,
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(tag = "layout", rename_all = "snake_case")]
enum KindHeader {
    Image { c: usize, h: usize, w: usize },
    Graph { n: usize, nf: usize },
    Flat { d: usize },
}

impl From<ModelKind> for KindHeader {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Image { c, h, w } => KindHeader::Image { c, h, w },
            ModelKind::Graph { n, nf } => KindHeader::Graph { n, nf },
            ModelKind::Flat { d } => KindHeader::Flat { d },
        }
    }
}

impl From<KindHeader> for ModelKind {
    fn from(k: KindHeader) -> Self {
        match k {
            KindHeader::Image { c, h, w } => ModelKind::Image { c, h, w },
            KindHeader::Graph { n, nf } => ModelKind::Graph { n, nf },
            KindHeader::Flat { d } => ModelKind::Flat { d },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerHeader {
    Actnorm {
        features: usize,
        initialized: bool,
    },
    Mix1x1 {
        features: usize,
    },
    ConvExp {
        channels: usize,
        padding: Padding,
        terms: usize,
    },
    GclExp {
        nf: usize,
        terms: usize,
        max_neighbours: usize,
    },
    CouplingImage {
        hidden: usize,
        mask_style: MaskStyle,
        parity: bool,
    },
    CouplingGraph {
        hidden: usize,
        msg_dim: usize,
        parity: bool,
    },
    CouplingFlat {
        hidden: usize,
        parity: bool,
    },
    Sylvester {
        hidden: usize,
        depth: usize,
        reflections: usize,
        gamma: f64,
        terms: usize,
    },
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum MaskStyle {
    ChannelHalf,
    Checkerboard,
}

fn describe_layer(layer: &Layer) -> Result<LayerHeader> {
    Ok(match layer {
        Layer::ActNorm(l) => LayerHeader::Actnorm {
            features: l.log_scale.numel(),
            initialized: l.initialized,
        },
        Layer::Mix1x1(l) => LayerHeader::Mix1x1 {
            features: l.weight.shape()[0],
        },
        Layer::ConvExp(l) => LayerHeader::ConvExp {
            channels: l.kernel.weights.shape()[0],
            padding: l.kernel.padding,
            terms: l.terms,
        },
        Layer::GclExp(l) => LayerHeader::GclExp {
            nf: l.theta0.shape()[0],
            terms: l.terms,
            max_neighbours: l.max_neighbours(),
        },
        Layer::CouplingImage(l) => LayerHeader::CouplingImage {
            hidden: l.hidden,
            mask_style: if l.mask_is_checkerboard() {
                MaskStyle::Checkerboard
            } else {
                MaskStyle::ChannelHalf
            },
            parity: l.mask_parity(),
        },
        Layer::CouplingGraph(l) => LayerHeader::CouplingGraph {
            hidden: l.hidden,
            msg_dim: l.msg_dim,
            parity: l.mask_parity(),
        },
        Layer::CouplingFlat(l) => LayerHeader::CouplingFlat {
            hidden: l.hidden,
            parity: l.mask_parity(),
        },
        Layer::Sylvester(l) => {
            let (hidden, depth) = l
                .masked_net_dims()
                .ok_or_else(|| Error::ModelFormat("triangular Sylvester layers are not serializable".into()))?;
            LayerHeader::Sylvester {
                hidden,
                depth,
                reflections: l.hh_vectors.len(),
                gamma: l.gamma,
                terms: l.exp_terms,
            }
        }
    })
}

fn build_layer(h: &LayerHeader, kind: &ModelKind) -> Result<Layer> {
    // deterministic construction; loaded parameter blocks overwrite the
    // placeholder initialization
    let mut rng = Rng::seeded(0);
    Ok(match *h {
        LayerHeader::Actnorm {
            features,
            initialized,
        } => {
            let mut l = ActNormLayer::identity(features);
            l.initialized = initialized;
            Layer::ActNorm(l)
        }
        LayerHeader::Mix1x1 { features } => Layer::Mix1x1(Mix1x1Layer::identity(features)),
        LayerHeader::ConvExp {
            channels,
            padding,
            terms,
        } => {
            let ModelKind::Image { c, h: ih, w } = *kind else {
                return Err(Error::ModelFormat(
                    "conv_exp layer inside a non-image model".into(),
                ));
            };
            if c != channels {
                return Err(Error::ModelFormat(format!(
                    "conv_exp channels {channels} do not match model channels {c}"
                )));
            }
            let mut l = ConvExpLayer::init(&ModelKind::Image { c, h: ih, w }, &mut rng);
            l.terms = terms;
            l.kernel.padding = padding;
            Layer::ConvExp(l)
        }
        LayerHeader::GclExp {
            nf,
            terms,
            max_neighbours,
        } => {
            let ModelKind::Graph { nf: knf, .. } = *kind else {
                return Err(Error::ModelFormat(
                    "gcl_exp layer inside a non-graph model".into(),
                ));
            };
            if knf != nf {
                return Err(Error::ModelFormat(format!(
                    "gcl_exp nf {nf} does not match model nf {knf}"
                )));
            }
            let mut l = GclExpLayer::init(kind, &mut rng);
            l.terms = terms;
            l.set_max_neighbours(max_neighbours);
            Layer::GclExp(l)
        }
        LayerHeader::CouplingImage {
            hidden,
            mask_style,
            parity,
        } => {
            let style = match mask_style {
                MaskStyle::ChannelHalf => ImageMask::ChannelHalf,
                MaskStyle::Checkerboard => ImageMask::Checkerboard,
            };
            Layer::CouplingImage(ImageCoupling::init(kind, style, parity, hidden, &mut rng))
        }
        LayerHeader::CouplingGraph {
            hidden,
            msg_dim,
            parity,
        } => Layer::CouplingGraph(GraphCoupling::init(kind, parity, hidden, msg_dim, &mut rng)),
        LayerHeader::CouplingFlat { hidden, parity } => {
            Layer::CouplingFlat(FlatCoupling::init(kind, parity, hidden, &mut rng))
        }
        LayerHeader::Sylvester {
            hidden,
            depth,
            reflections,
            gamma,
            terms,
        } => {
            let ModelKind::Image { c, h: ih, w } = *kind else {
                return Err(Error::ModelFormat(
                    "sylvester layer inside a non-image model".into(),
                ));
            };
            let mut l = SylvesterLayer::init_conv(&[c, ih, w], hidden, depth, reflections, &mut rng);
            l.gamma = gamma;
            l.exp_terms = terms;
            Layer::Sylvester(l)
        }
    })
}

pub fn save_model(model: &FlowModel, path: &Path) -> Result<()> {
    let header = Header {
        kind: model.kind.into(),
        layers: model
            .layers
            .iter()
            .map(describe_layer)
            .collect::<Result<_>>()?,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::ModelFormat(format!("header encode: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in model.params() {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FlowModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
        return Err(Error::ModelFormat(
            "bad magic: not a flow model container".into(),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(Error::ModelFormat(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::ModelFormat(format!("header parse: {e}")))?;
    let kind: ModelKind = header.kind.into();
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        layers.push(build_layer(lh, &kind)?);
    }
    let mut model = FlowModel::new(kind, layers);

    // read parameter blocks in header order
    let mut params = model.params();
    let mut offset = header_end;
    for (pi, p) in params.iter_mut().enumerate() {
        let need = p.numel() * 8;
        if bytes.len() < offset + need {
            return Err(Error::ModelFormat(format!(
                "parameter block {pi} truncated: need {need} bytes at offset {offset}, file has {}",
                bytes.len()
            )));
        }
        let mut values = Vec::with_capacity(p.numel());
        for i in 0..p.numel() {
            let chunk: [u8; 8] = bytes[offset + 8 * i..offset + 8 * i + 8].try_into().unwrap();
            values.push(f64::from_le_bytes(chunk));
        }
        *p = Tensor::from_vec(p.shape(), values);
        offset += need;
    }
    if offset != bytes.len() {
        return Err(Error::ModelFormat(format!(
            "trailing bytes: file has {} bytes, parameters end at {offset}",
            bytes.len()
        )));
    }
    model.set_params(&params);
    // spectral certificates are derived state; recompute from the loaded
    // weights before first use
    model.refresh_certificates(200);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_graph_model() -> FlowModel {
        let mut rng = Rng::seeded(1234);
        let kind = ModelKind::Graph { n: 4, nf: 2 };
        let mut layers = Vec::new();
        for sub in 0..2 {
            layers.push(Layer::ActNorm(ActNormLayer::identity(2)));
            layers.push(Layer::Mix1x1(Mix1x1Layer::identity(2)));
            layers.push(Layer::GclExp(GclExpLayer::init(&kind, &mut rng)));
            layers.push(Layer::CouplingGraph(GraphCoupling::init(
                &kind,
                sub % 2 == 1,
                16,
                8,
                &mut rng,
            )));
        }
        let mut model = FlowModel::new(kind, layers);
        let mut ps = model.params();
        for p in &mut ps {
            let noise = Tensor::randn(&mut rng, p.shape(), 0.2);
            *p = p.add(&noise);
        }
        model.set_params(&ps);
        model.refresh_certificates(100);
        model
    }

    #[test]
    fn save_load_round_trip_preserves_evaluation() {
        let model = sample_graph_model();
        let mut rng = Rng::seeded(77);
        let x = Tensor::randn(&mut rng, &[4, 4, 2], 1.0);
        let nll_before = model.nll(&x).unwrap();
        let dir = std::env::temp_dir().join("convexp_model_io");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.cvxp");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let nll_after = loaded.nll(&x).unwrap();
        assert!(
            (nll_before - nll_after).abs() < 1e-12,
            "{nll_before} vs {nll_after}"
        );
    }

    #[test]
    fn image_model_round_trip() {
        let mut rng = Rng::seeded(55);
        let kind = ModelKind::Image { c: 2, h: 1, w: 1 };
        let layers = vec![
            Layer::ActNorm(ActNormLayer::identity(2)),
            Layer::ConvExp(ConvExpLayer::init(&kind, &mut rng)),
            Layer::Sylvester(SylvesterLayer::init_conv(&[2, 1, 1], 8, 2, 2, &mut rng)),
            Layer::CouplingImage(ImageCoupling::init(
                &kind,
                ImageMask::ChannelHalf,
                false,
                8,
                &mut rng,
            )),
        ];
        let model = FlowModel::new(kind, layers);
        let dir = std::env::temp_dir().join("convexp_model_io");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("image.cvxp");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let x = Tensor::randn(&mut rng, &[3, 2, 1, 1], 1.0);
        let (a, la) = model.forward(&x).unwrap();
        let (b, lb) = loaded.forward(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for (u, v) in la.iter().zip(&lb) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupted_header_is_reported() {
        let model = sample_graph_model();
        let dir = std::env::temp_dir().join("convexp_model_io");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.cvxp");
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // mangle a header field name inside the JSON
        let json_start = 12;
        let needle = b"msg_dim";
        let pos = bytes[json_start..]
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap()
            + json_start;
        bytes[pos] = b'x';
        let bad = dir.join("corrupt_bad.cvxp");
        std::fs::write(&bad, &bytes).unwrap();
        let err = load_model(&bad).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("header parse"), "unexpected error: {msg}");
        // truncated parameters
        let full = std::fs::read(&path).unwrap();
        let cut = dir.join("corrupt_cut.cvxp");
        std::fs::write(&cut, &full[..full.len() - 16]).unwrap();
        let err = load_model(&cut).unwrap_err();
        assert!(format!("{err}").contains("truncated"), "{err}");
        // bad magic
        let mut wrong = full.clone();
        wrong[0] = b'X';
        let badmagic = dir.join("corrupt_magic.cvxp");
        std::fs::write(&badmagic, &wrong).unwrap();
        let err = load_model(&badmagic).unwrap_err();
        assert!(format!("{err}").contains("magic"), "{err}");
    }
}
