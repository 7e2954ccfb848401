//! Checkpoints: a versioned named-parameter archive with the architecture
//! config echoed in, so evaluation refuses mismatched configurations.

use std::io::Write;
use std::path::Path;

use vqreg_core::Scalar;
use vqreg_nn::graph::Shape;
use vqreg_nn::Gemm;
use vqreg_vq::CodebookInit;

use crate::config::NetworkConfig;
use crate::error::NetError;
use crate::regnet::RegModel;
use crate::segnet::{SegConfig, SegModel};

const FORMAT_TAG: &str = "vqreg-checkpoint";
const VERSION: u32 = 1;

fn shape_to_string(s: &Shape) -> String {
    match s {
        Shape::Scalar => "scalar".to_string(),
        Shape::Map { channels, dims } => {
            format!("map:{channels}:{} {} {}", dims[0], dims[1], dims[2])
        }
        Shape::Tensor(d) => {
            let parts: Vec<String> = d.iter().map(|v| v.to_string()).collect();
            format!("tensor:{}", parts.join(" "))
        }
    }
}

fn shape_from_string(s: &str) -> Result<Shape, NetError> {
    if s == "scalar" {
        return Ok(Shape::Scalar);
    }
    if let Some(rest) = s.strip_prefix("map:") {
        let (c, dims) = rest
            .split_once(':')
            .ok_or_else(|| NetError::MalformedCheckpoint(format!("bad shape `{s}`")))?;
        let c = c
            .parse::<usize>()
            .map_err(|_| NetError::MalformedCheckpoint(format!("bad shape `{s}`")))?;
        let d: Vec<usize> = dims
            .split_whitespace()
            .map(|p| p.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| NetError::MalformedCheckpoint(format!("bad shape `{s}`")))?;
        if d.len() != 3 {
            return Err(NetError::MalformedCheckpoint(format!("bad shape `{s}`")));
        }
        return Ok(Shape::Map { channels: c, dims: [d[0], d[1], d[2]] });
    }
    if let Some(rest) = s.strip_prefix("tensor:") {
        let d: Vec<usize> = rest
            .split_whitespace()
            .map(|p| p.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| NetError::MalformedCheckpoint(format!("bad shape `{s}`")))?;
        return Ok(Shape::Tensor(d));
    }
    Err(NetError::MalformedCheckpoint(format!("bad shape `{s}`")))
}

struct RawCheckpoint {
    kind: String,
    fields: Vec<(String, String)>,
    params: Vec<(String, Shape, Vec<f64>)>,
}

fn write_checkpoint(
    path: &Path,
    kind: &str,
    fields: &[(String, String)],
    params: &[(&str, &Shape, Vec<f64>)],
) -> Result<(), NetError> {
    let mut header = Vec::new();
    let _ = writeln!(header, "format={FORMAT_TAG}");
    let _ = writeln!(header, "version={VERSION}");
    let _ = writeln!(header, "kind={kind}");
    let _ = writeln!(header, "dtype=f64");
    for (k, v) in fields {
        let _ = writeln!(header, "{k}={v}");
    }
    let _ = writeln!(header, "params={}", params.len());
    for (name, shape, data) in params {
        let _ = writeln!(header, "param={name};{};{}", shape_to_string(shape), data.len());
    }
    header.push(b'\n');
    let mut bytes = header;
    for (_, _, data) in params {
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| NetError::Io { path: path.into(), source: e })
}

fn read_checkpoint(path: &Path) -> Result<RawCheckpoint, NetError> {
    let bytes = std::fs::read(path).map_err(|e| NetError::Io { path: path.into(), source: e })?;
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| NetError::MalformedCheckpoint("no blank line after header".into()))?;
    let header = std::str::from_utf8(&bytes[..sep + 1])
        .map_err(|_| NetError::MalformedCheckpoint("header is not UTF-8".into()))?;
    let mut kind = None;
    let mut fields = Vec::new();
    let mut manifest: Vec<(String, Shape, usize)> = Vec::new();
    let mut format_ok = false;
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| NetError::MalformedCheckpoint(format!("bad line `{line}`")))?;
        match key {
            "format" => format_ok = value == FORMAT_TAG,
            "version" => {
                if value != VERSION.to_string() {
                    return Err(NetError::MalformedCheckpoint(format!(
                        "unsupported version `{value}`"
                    )));
                }
            }
            "kind" => kind = Some(value.to_string()),
            "dtype" => {
                if value != "f64" {
                    return Err(NetError::MalformedCheckpoint("payload must be f64".into()));
                }
            }
            "params" => {}
            "param" => {
                let parts: Vec<&str> = value.split(';').collect();
                if parts.len() != 3 {
                    return Err(NetError::MalformedCheckpoint(format!("bad param `{value}`")));
                }
                let len = parts[2].parse::<usize>().map_err(|_| {
                    NetError::MalformedCheckpoint(format!("bad param length `{}`", parts[2]))
                })?;
                manifest.push((parts[0].to_string(), shape_from_string(parts[1])?, len));
            }
            other => fields.push((other.to_string(), value.to_string())),
        }
    }
    if !format_ok {
        return Err(NetError::MalformedCheckpoint("missing format tag".into()));
    }
    let kind = kind.ok_or_else(|| NetError::MalformedCheckpoint("missing kind".into()))?;
    let total: usize = manifest.iter().map(|(_, _, l)| l).sum();
    let payload = &bytes[sep + 2..];
    if payload.len() != total * 8 {
        return Err(NetError::MalformedCheckpoint(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut params = Vec::with_capacity(manifest.len());
    let mut offset = 0usize;
    for (name, shape, len) in manifest {
        let mut data = Vec::with_capacity(len);
        for chunk in payload[offset * 8..(offset + len) * 8].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset += len;
        params.push((name, shape, data));
    }
    Ok(RawCheckpoint { kind, fields, params })
}

fn net_config_fields(cfg: &NetworkConfig) -> Vec<(String, String)> {
    let ch: Vec<String> = cfg.stage_channels.iter().map(|c| c.to_string()).collect();
    vec![
        ("net_stage_channels".into(), ch.join(" ")),
        ("net_convs_per_block".into(), cfg.convs_per_block.to_string()),
        ("net_dict_size_v".into(), cfg.dict_sizes.vanilla.to_string()),
        ("net_dict_size_h".into(), cfg.dict_sizes.hierarchical.to_string()),
        ("net_dict_size_c".into(), cfg.dict_sizes.collaborative.to_string()),
        ("net_dict_channels_v".into(), cfg.dict_channels.vanilla.to_string()),
        ("net_dict_channels_h".into(), cfg.dict_channels.hierarchical.to_string()),
        ("net_dict_channels_c".into(), cfg.dict_channels.collaborative.to_string()),
        ("net_quantizers".into(), cfg.enabled.tag()),
        (
            "net_input_dims".into(),
            format!("{} {} {}", cfg.input_dims[0], cfg.input_dims[1], cfg.input_dims[2]),
        ),
    ]
}

fn net_config_from_fields(fields: &[(String, String)]) -> Result<NetworkConfig, NetError> {
    let get = |key: &str| -> Result<&str, NetError> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| NetError::MalformedCheckpoint(format!("missing field `{key}`")))
    };
    let usize_list = |s: &str| -> Result<Vec<usize>, NetError> {
        s.split_whitespace()
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| NetError::MalformedCheckpoint(format!("bad integer `{p}`")))
            })
            .collect()
    };
    let one = |key: &str| -> Result<usize, NetError> {
        get(key)?
            .parse::<usize>()
            .map_err(|_| NetError::MalformedCheckpoint(format!("bad integer for `{key}`")))
    };
    let dims = usize_list(get("net_input_dims")?)?;
    if dims.len() != 3 {
        return Err(NetError::MalformedCheckpoint("net_input_dims must have 3 components".into()));
    }
    let cfg = NetworkConfig {
        stage_channels: usize_list(get("net_stage_channels")?)?,
        convs_per_block: one("net_convs_per_block")?,
        dict_sizes: crate::config::DictSizes {
            vanilla: one("net_dict_size_v")?,
            hierarchical: one("net_dict_size_h")?,
            collaborative: one("net_dict_size_c")?,
        },
        dict_channels: crate::config::DictChannels {
            vanilla: one("net_dict_channels_v")?,
            hierarchical: one("net_dict_channels_h")?,
            collaborative: one("net_dict_channels_c")?,
        },
        enabled: crate::config::QuantizerSet::parse(get("net_quantizers")?)?,
        input_dims: [dims[0], dims[1], dims[2]],
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_reg<T: Gemm>(model: &RegModel<T>, path: impl AsRef<Path>) -> Result<(), NetError> {
    let mut fields = net_config_fields(&model.config);
    fields.push(("collab_init".into(), model.collaborative_init().name().to_string()));
    let params: Vec<(&str, &Shape, Vec<f64>)> = model
        .params
        .entries()
        .iter()
        .map(|e| {
            (e.name.as_str(), &e.shape, e.data.iter().map(|v| v.to_f64()).collect::<Vec<f64>>())
        })
        .collect();
    write_checkpoint(path.as_ref(), "reg", &fields, &params)
}

pub fn load_reg<T: Gemm>(path: impl AsRef<Path>) -> Result<RegModel<T>, NetError> {
    let raw = read_checkpoint(path.as_ref())?;
    if raw.kind != "reg" {
        return Err(NetError::MalformedCheckpoint(format!(
            "expected a registration checkpoint, got kind `{}`",
            raw.kind
        )));
    }
    let cfg = net_config_from_fields(&raw.fields)?;
    let mut model = RegModel::<T>::new(cfg, 0)?;
    fill_params(&mut model.params, &raw.params)?;
    let collab = raw
        .fields
        .iter()
        .find(|(k, _)| k == "collab_init")
        .map(|(_, v)| v.as_str())
        .unwrap_or("random");
    model.set_collaborative_init_tag(
        CodebookInit::parse(collab).map_err(|e| NetError::MalformedCheckpoint(e.to_string()))?,
    );
    Ok(model)
}

/// Load and refuse configs that do not match the expectation.
pub fn load_reg_expect<T: Gemm>(
    path: impl AsRef<Path>,
    expected: &NetworkConfig,
) -> Result<RegModel<T>, NetError> {
    let model = load_reg::<T>(path)?;
    if &model.config != expected {
        return Err(NetError::ConfigMismatch(format!(
            "checkpoint config {:?} differs from the requested config {:?}",
            model.config, expected
        )));
    }
    Ok(model)
}

pub fn save_seg<T: Gemm>(model: &SegModel<T>, path: impl AsRef<Path>) -> Result<(), NetError> {
    let ch: Vec<String> = model.config.stage_channels.iter().map(|c| c.to_string()).collect();
    let fields = vec![
        ("seg_stage_channels".to_string(), ch.join(" ")),
        ("seg_bottleneck_channels".to_string(), model.config.bottleneck_channels.to_string()),
        (
            "seg_input_dims".to_string(),
            format!(
                "{} {} {}",
                model.config.input_dims[0], model.config.input_dims[1], model.config.input_dims[2]
            ),
        ),
    ];
    let params: Vec<(&str, &Shape, Vec<f64>)> = model
        .params
        .entries()
        .iter()
        .map(|e| {
            (e.name.as_str(), &e.shape, e.data.iter().map(|v| v.to_f64()).collect::<Vec<f64>>())
        })
        .collect();
    write_checkpoint(path.as_ref(), "seg", &fields, &params)
}

pub fn load_seg<T: Gemm>(path: impl AsRef<Path>) -> Result<SegModel<T>, NetError> {
    let raw = read_checkpoint(path.as_ref())?;
    if raw.kind != "seg" {
        return Err(NetError::MalformedCheckpoint(format!(
            "expected a segmentation checkpoint, got kind `{}`",
            raw.kind
        )));
    }
    let get = |key: &str| -> Result<&str, NetError> {
        raw.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| NetError::MalformedCheckpoint(format!("missing field `{key}`")))
    };
    let stage_channels: Vec<usize> = get("seg_stage_channels")?
        .split_whitespace()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| NetError::MalformedCheckpoint(format!("bad integer `{p}`")))
        })
        .collect::<Result<_, _>>()?;
    let bottleneck = get("seg_bottleneck_channels")?
        .parse::<usize>()
        .map_err(|_| NetError::MalformedCheckpoint("bad bottleneck channels".into()))?;
    let dims: Vec<usize> = get("seg_input_dims")?
        .split_whitespace()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| NetError::MalformedCheckpoint(format!("bad integer `{p}`")))
        })
        .collect::<Result<_, _>>()?;
    if dims.len() != 3 {
        return Err(NetError::MalformedCheckpoint("seg_input_dims must have 3 components".into()));
    }
    let cfg = SegConfig {
        stage_channels,
        bottleneck_channels: bottleneck,
        input_dims: [dims[0], dims[1], dims[2]],
    };
    let mut model = SegModel::<T>::new(cfg, 0)?;
    fill_params(&mut model.params, &raw.params)?;
    Ok(model)
}

fn fill_params<T: Scalar>(
    store: &mut vqreg_nn::ParamStore<T>,
    loaded: &[(String, Shape, Vec<f64>)],
) -> Result<(), NetError> {
    if loaded.len() != store.len() {
        return Err(NetError::MalformedCheckpoint(format!(
            "checkpoint holds {} params, architecture expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (name, shape, data) in loaded {
        let id = store.by_name(name).ok_or_else(|| {
            NetError::MalformedCheckpoint(format!("unexpected param `{name}`"))
        })?;
        if &store.entry(id).shape != shape || store.entry(id).data.len() != data.len() {
            return Err(NetError::MalformedCheckpoint(format!(
                "param `{name}` shape mismatch"
            )));
        }
        let dst = store.data_mut(id);
        for (d, &v) in dst.iter_mut().zip(data) {
            *d = T::from_f64(v);
        }
    }
    Ok(())
}
