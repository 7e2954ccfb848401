//! On-disk formats.
//!
//! Volumes, masks and displacement fields share one two-part container: a
//! UTF-8 text header of `key=value` lines terminated by a blank line,
//! followed by a raw little-endian payload in the declared order. Landmark
//! sets are plain text, one `label,x_mm,y_mm,z_mm` line per landmark.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::CoreError;
use crate::volume::{DisplacementField, Dtype, LandmarkSet, MaskKind, MaskVolume, Volume3D};

const ORDER_TAG: &str = "x-fastest";
const CHANNEL_ORDER_TAG: &str = "xyz";

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: Dtype,
    channels: usize,
    kind: Option<MaskKind>,
}

fn parse_triplet_f64(value: &str, key: &str) -> Result<[f64; 3], CoreError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(CoreError::MalformedHeader(format!(
            "{key} must have 3 components, got `{value}`"
        )));
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse::<f64>()
            .map_err(|_| CoreError::MalformedHeader(format!("bad {key} component `{p}`")))?;
    }
    Ok(out)
}

fn parse_header(text: &str) -> Result<Header, CoreError> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CoreError::MalformedHeader(format!("line without `=`: `{line}`")))?;
        if fields.insert(key, value).is_some() {
            return Err(CoreError::MalformedHeader(format!("duplicate key `{key}`")));
        }
    }
    for key in fields.keys() {
        match *key {
            "dims" | "spacing" | "origin" | "dtype" | "order" | "channels" | "channel-order"
            | "kind" => {}
            other => {
                return Err(CoreError::MalformedHeader(format!("unknown key `{other}`")));
            }
        }
    }
    let get = |key: &str| -> Result<&str, CoreError> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| CoreError::MalformedHeader(format!("missing key `{key}`")))
    };

    let dims_raw = parse_triplet_f64(get("dims")?, "dims")?;
    let mut dims = [0usize; 3];
    for (i, d) in dims_raw.iter().enumerate() {
        if d.fract() != 0.0 || *d < 1.0 {
            return Err(CoreError::MalformedHeader(format!("bad dims component `{d}`")));
        }
        dims[i] = *d as usize;
    }
    let spacing = parse_triplet_f64(get("spacing")?, "spacing")?;
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(CoreError::MalformedHeader("spacing must be > 0".into()));
    }
    let origin = parse_triplet_f64(get("origin")?, "origin")?;
    let dtype = Dtype::parse(get("dtype")?)?;
    let order = get("order")?;
    if order != ORDER_TAG {
        return Err(CoreError::MalformedHeader(format!("unsupported order `{order}`")));
    }
    let channels = match fields.get("channels") {
        None => 1,
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| CoreError::MalformedHeader(format!("bad channels `{v}`")))?,
    };
    if channels > 1 {
        let co = get("channel-order")?;
        if co != CHANNEL_ORDER_TAG {
            return Err(CoreError::MalformedHeader(format!("unsupported channel-order `{co}`")));
        }
    }
    let kind = match fields.get("kind") {
        None => None,
        Some(v) => Some(MaskKind::parse(v)?),
    };
    Ok(Header { dims, spacing, origin, dtype, channels, kind })
}

fn split_file(bytes: &[u8], path: &Path) -> Result<(String, Vec<u8>), CoreError> {
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| CoreError::MalformedHeader(format!("{}: no blank line", path.display())))?;
    let header = std::str::from_utf8(&bytes[..sep + 1])
        .map_err(|_| CoreError::MalformedHeader("header is not UTF-8".into()))?
        .to_string();
    Ok((header, bytes[sep + 2..].to_vec()))
}

fn decode_payload(bytes: &[u8], dtype: Dtype, count: usize) -> Result<Vec<f64>, CoreError> {
    let expected = count * dtype.byte_size();
    if bytes.len() != expected {
        return Err(CoreError::SizeMismatch { expected, actual: bytes.len() });
    }
    let mut out = Vec::with_capacity(count);
    match dtype {
        Dtype::F32 => {
            for chunk in bytes.chunks_exact(4) {
                out.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in bytes.chunks_exact(8) {
                out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Ok(out)
}

fn encode_payload(data: &[f64], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F32 => {
            let mut out = Vec::with_capacity(data.len() * 4);
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out
        }
        Dtype::F64 => {
            let mut out = Vec::with_capacity(data.len() * 8);
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
    }
}

fn write_header(
    out: &mut Vec<u8>,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: Dtype,
    channels: usize,
    kind: Option<MaskKind>,
) {
    let _ = writeln!(out, "dims={} {} {}", dims[0], dims[1], dims[2]);
    let _ = writeln!(out, "spacing={} {} {}", spacing[0], spacing[1], spacing[2]);
    let _ = writeln!(out, "origin={} {} {}", origin[0], origin[1], origin[2]);
    let _ = writeln!(out, "dtype={}", dtype.name());
    let _ = writeln!(out, "order={ORDER_TAG}");
    if channels > 1 {
        let _ = writeln!(out, "channels={channels}");
        let _ = writeln!(out, "channel-order={CHANNEL_ORDER_TAG}");
    }
    if let Some(k) = kind {
        let _ = writeln!(out, "kind={}", k.name());
    }
    out.push(b'\n');
}

pub fn save_volume(volume: &Volume3D, path: impl AsRef<Path>) -> Result<(), CoreError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_header(
        &mut bytes,
        volume.dims(),
        volume.spacing(),
        volume.origin(),
        volume.dtype(),
        1,
        None,
    );
    bytes.extend_from_slice(&encode_payload(volume.data(), volume.dtype()));
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D, CoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let (header_text, payload) = split_file(&bytes, path)?;
    let h = parse_header(&header_text)?;
    if h.channels != 1 {
        return Err(CoreError::MalformedHeader(format!(
            "expected single-channel volume, got {} channels",
            h.channels
        )));
    }
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let data = decode_payload(&payload, h.dtype, n)?;
    Ok(Volume3D::new(h.dims, h.spacing, h.origin, data)?.with_dtype(h.dtype))
}

pub fn save_mask(mask: &MaskVolume, path: impl AsRef<Path>) -> Result<(), CoreError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_header(
        &mut bytes,
        mask.dims(),
        mask.spacing(),
        mask.origin(),
        mask.dtype(),
        1,
        Some(mask.kind()),
    );
    bytes.extend_from_slice(&encode_payload(mask.data(), mask.dtype()));
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume, CoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let (header_text, payload) = split_file(&bytes, path)?;
    let h = parse_header(&header_text)?;
    let kind = h
        .kind
        .ok_or_else(|| CoreError::MalformedHeader("mask file missing `kind`".into()))?;
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let data = decode_payload(&payload, h.dtype, n)?;
    Ok(MaskVolume::new(h.dims, h.spacing, h.origin, kind, data)?.with_dtype(h.dtype))
}

/// Displacement fields reuse the volume container with a 3-channel payload:
/// the x, y and z component planes stored consecutively.
pub fn save_ddf(ddf: &DisplacementField, path: impl AsRef<Path>) -> Result<(), CoreError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_header(&mut bytes, ddf.dims(), ddf.spacing(), [0.0; 3], Dtype::F64, 3, None);
    bytes.extend_from_slice(&encode_payload(ddf.data(), Dtype::F64));
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_ddf(path: impl AsRef<Path>) -> Result<DisplacementField, CoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let (header_text, payload) = split_file(&bytes, path)?;
    let h = parse_header(&header_text)?;
    if h.channels != 3 {
        return Err(CoreError::MalformedHeader(format!(
            "expected 3-channel field, got {} channels",
            h.channels
        )));
    }
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let data = decode_payload(&payload, h.dtype, 3 * n)?;
    DisplacementField::new(h.dims, h.spacing, data)
}

pub fn save_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<(), CoreError> {
    let path = path.as_ref();
    let mut text = String::new();
    for (label, p) in set.labels().iter().zip(set.points()) {
        text.push_str(&format!("{label},{},{},{}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet, CoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut labels = Vec::new();
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(CoreError::InvalidLandmarks(format!(
                "line {}: expected `label,x,y,z`, got `{line}`",
                lineno + 1
            )));
        }
        let mut p = [0.0; 3];
        for (i, s) in parts[1..].iter().enumerate() {
            p[i] = s.parse::<f64>().map_err(|_| {
                CoreError::InvalidLandmarks(format!("line {}: bad coordinate `{s}`", lineno + 1))
            })?;
        }
        labels.push(parts[0].to_string());
        points.push(p);
    }
    LandmarkSet::new(labels, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = Volume3D::new([4, 4, 4], [1.0; 3], [0.0; 3], vec![0.0; 64]).unwrap();
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.dims(), [4, 4, 4]);
        assert_eq!(loaded.data(), v.data());
        // bytes of a second save are identical
        let path2 = dir.path().join("v2.vol");
        save_volume(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn spacing_survives_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = Volume3D::new([2, 2, 2], [0.7, 0.7, 0.7], [0.0; 3], vec![0.25; 8]).unwrap();
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.spacing(), [0.7, 0.7, 0.7]);
    }

    #[test]
    fn payload_size_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");
        // header declares 8x8x8 but payload holds 7x8x8 f32 values
        let mut bytes = Vec::new();
        write_header(&mut bytes, [8, 8, 8], [1.0; 3], [0.0; 3], Dtype::F32, 1, None);
        bytes.extend_from_slice(&vec![0u8; 7 * 8 * 8 * 4]);
        std::fs::write(&path, bytes).unwrap();
        match load_volume(&path) {
            Err(CoreError::SizeMismatch { expected, actual }) => {
                assert_eq!(expected, 8 * 8 * 8 * 4);
                assert_eq!(actual, 7 * 8 * 8 * 4);
            }
            other => panic!("expected SizeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_malformed_header_error() {
        assert!(matches!(load_volume("/nonexistent/v.vol"), Err(CoreError::Io { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.vol");
        std::fs::write(&path, b"dims=2 2 2\nnot a header line\n\n").unwrap();
        assert!(matches!(load_volume(&path), Err(CoreError::MalformedHeader(_))));
        let path2 = dir.path().join("h2.vol");
        std::fs::write(&path2, b"dims=2 2 2\nmystery=1\n\n").unwrap();
        assert!(matches!(load_volume(&path2), Err(CoreError::MalformedHeader(_))));
    }

    #[test]
    fn ddf_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.ddf");
        let mut u = DisplacementField::zeros([3, 3, 3], [0.7; 3]);
        u.set(1, 1, 1, [0.25, -0.5, 1.5]);
        save_ddf(&u, &path).unwrap();
        let loaded = load_ddf(&path).unwrap();
        assert_eq!(loaded, u);
    }

    #[test]
    fn nifti_reader_parses_a_minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let dims = [3usize, 2, 2];
        let mut hdr = vec![0u8; 352];
        hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
        // dim[0] = 3, dim[1..3] = dims
        hdr[40..42].copy_from_slice(&3i16.to_le_bytes());
        hdr[42..44].copy_from_slice(&(dims[0] as i16).to_le_bytes());
        hdr[44..46].copy_from_slice(&(dims[1] as i16).to_le_bytes());
        hdr[46..48].copy_from_slice(&(dims[2] as i16).to_le_bytes());
        hdr[70..72].copy_from_slice(&16i16.to_le_bytes()); // f32
        hdr[72..74].copy_from_slice(&32i16.to_le_bytes());
        for a in 0..3 {
            hdr[76 + 4 * (a + 1)..80 + 4 * (a + 1)].copy_from_slice(&0.7f32.to_le_bytes());
        }
        hdr[108..112].copy_from_slice(&352.0f32.to_le_bytes()); // vox_offset
        hdr[112..116].copy_from_slice(&2.0f32.to_le_bytes()); // scl_slope
        hdr[116..120].copy_from_slice(&1.0f32.to_le_bytes()); // scl_inter
        hdr[344..348].copy_from_slice(b"n+1\0");
        let mut bytes = hdr;
        for i in 0..12 {
            bytes.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let v = load_nifti(&path).unwrap();
        assert_eq!(v.dims(), [3, 2, 2]);
        assert_eq!(v.spacing(), [0.7f32 as f64, 0.7f32 as f64, 0.7f32 as f64]);
        // value = raw * slope + inter
        assert_eq!(v.at(1, 0, 0), 0.5 * 2.0 + 1.0);
    }

    #[test]
    fn landmark_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.lmk");
        let set = LandmarkSet::new(
            vec!["cyst-1".into(), "calc-2".into()],
            vec![[1.4, 2.8, 3.5], [0.0, -1.0, 9.25]],
        )
        .unwrap();
        save_landmarks(&set, &path).unwrap();
        let loaded = load_landmarks(&path).unwrap();
        assert_eq!(loaded, set);
    }
}

/// Minimal NIfTI-1 reader: single-file uncompressed `.nii`, little-endian,
/// common scalar dtypes. The custom volume format remains the contract for
/// tests; this is a convenience for bringing in external data.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume3D, CoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < 352 {
        return Err(CoreError::MalformedHeader("nifti: file shorter than its header".into()));
    }
    let i16_at = |off: usize| i16::from_le_bytes([bytes[off], bytes[off + 1]]);
    let i32_at = |off: usize| {
        i32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
    };
    let f32_at = |off: usize| {
        f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
    };
    if i32_at(0) != 348 {
        return Err(CoreError::MalformedHeader(
            "nifti: sizeof_hdr != 348 (big-endian files are not supported)".into(),
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(CoreError::MalformedHeader("nifti: expected single-file magic n+1".into()));
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(CoreError::MalformedHeader(format!("nifti: bad ndim {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        let d = i16_at(40 + 2 * (a + 1));
        if d < 1 {
            return Err(CoreError::MalformedHeader(format!("nifti: bad dim {d}")));
        }
        dims[a] = d as usize;
    }
    for a in 4..=(ndim as usize) {
        if i16_at(40 + 2 * a) > 1 {
            return Err(CoreError::MalformedHeader(
                "nifti: only scalar 3D volumes are supported".into(),
            ));
        }
    }
    let datatype = i16_at(70);
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        let s = f32_at(76 + 4 * (a + 1)) as f64;
        spacing[a] = if s > 0.0 { s } else { 1.0 };
    }
    let origin = [f32_at(268) as f64, f32_at(272) as f64, f32_at(276) as f64];
    let vox_offset = f32_at(108) as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let (slope, inter) = if slope == 0.0 { (1.0, 0.0) } else { (slope, inter) };

    let n = dims[0] * dims[1] * dims[2];
    let elem = match datatype {
        2 => 1,   // u8
        4 => 2,   // i16
        8 => 4,   // i32
        16 => 4,  // f32
        64 => 8,  // f64
        512 => 2, // u16
        other => {
            return Err(CoreError::MalformedHeader(format!(
                "nifti: unsupported datatype {other}"
            )))
        }
    };
    let expected = vox_offset + n * elem;
    if bytes.len() < expected {
        return Err(CoreError::SizeMismatch { expected, actual: bytes.len() });
    }
    let payload = &bytes[vox_offset..vox_offset + n * elem];
    let mut data = Vec::with_capacity(n);
    match datatype {
        2 => data.extend(payload.iter().map(|&b| b as f64)),
        4 => data.extend(payload.chunks_exact(2).map(|c| {
            i16::from_le_bytes([c[0], c[1]]) as f64
        })),
        8 => data.extend(payload.chunks_exact(4).map(|c| {
            i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
        })),
        16 => data.extend(payload.chunks_exact(4).map(|c| {
            f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
        })),
        64 => data.extend(payload.chunks_exact(8).map(|c| {
            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
        })),
        512 => data.extend(payload.chunks_exact(2).map(|c| {
            u16::from_le_bytes([c[0], c[1]]) as f64
        })),
        _ => unreachable!(),
    }
    if slope != 1.0 || inter != 0.0 {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Volume3D::new(dims, spacing, origin, data)
}
