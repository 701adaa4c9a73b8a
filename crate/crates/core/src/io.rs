//! Binary file formats. All multi-byte values are little-endian.
//!
//! Tensor: `"FCST"`, version, dtype tag (0 = f32, 1 = f64), rank, dims, data.
//! Pyramid: level count, then per level a stride followed by an embedded tensor.
//! Flow: `"FCFL"`, height, width, dx plane, dy plane (f64), validity bitmap
//! packed LSB first in scan order.
//! Model: `"FCSS"`, version, dtype tag, config echo, backbone layers, patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneParams, FeaturePyramid, PyramidLevel, StageConfig};
use crate::css::{CssConfig, LevelPatterns, Offset, SamplingPatterns, ShiftMode};
use crate::error::{Error, Result};
use crate::matching::FlowField;
use crate::model::Model;
use crate::tensor::{ConvParams, Tensor};
use crate::Real;

pub const TENSOR_MAGIC: &[u8; 4] = b"FCST";
pub const FLOW_MAGIC: &[u8; 4] = b"FCFL";
pub const MODEL_MAGIC: &[u8; 4] = b"FCSS";
pub const TENSOR_VERSION: u32 = 1;
pub const MODEL_VERSION: u32 = 1;

const DTYPE_F32: u32 = 0;
const DTYPE_F64: u32 = 1;

#[cfg(not(feature = "single"))]
const NATIVE_DTYPE: u32 = DTYPE_F64;
#[cfg(feature = "single")]
const NATIVE_DTYPE: u32 = DTYPE_F32;

// Guards against absurd allocations from corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 32;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_real(w: &mut impl Write, v: Real) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_real(r: &mut impl Read, dtype: u32) -> Result<Real> {
    match dtype {
        DTYPE_F32 => {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(f32::from_le_bytes(b) as Real)
        }
        DTYPE_F64 => Ok(get_f64(r)? as Real),
        other => Err(Error::Format(format!("unknown dtype tag {other}"))),
    }
}

fn get_reals(r: &mut impl Read, dtype: u32, n: usize) -> Result<Vec<Real>> {
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    let mut bytes = vec![0u8; n * width];
    r.read_exact(&mut bytes)?;
    Ok(if width == 4 {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect()
    })
}

fn put_reals(w: &mut impl Write, values: &[Real]) -> Result<()> {
    let mut bytes = Vec::with_capacity(std::mem::size_of_val(values));
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&b).into_owned(),
        },
        _ => Error::Io(e),
    })?;
    if &b != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&b).into_owned(),
        });
    }
    Ok(())
}

fn check_version(r: &mut impl Read, what: &'static str, expected: u32) -> Result<()> {
    let found = get_u32(r)?;
    if found != expected {
        return Err(Error::Version {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------- tensors

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    put_u32(w, TENSOR_VERSION)?;
    put_u32(w, NATIVE_DTYPE)?;
    put_u32(w, 3)?;
    let (c, h, wd) = t.shape();
    for d in [c, h, wd] {
        put_u32(w, d as u32)?;
    }
    put_reals(w, t.data())
}

/// Reads ranks 1 to 3; lower ranks gain leading unit dimensions.
pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    expect_magic(r, TENSOR_MAGIC)?;
    check_version(r, "tensor", TENSOR_VERSION)?;
    let dtype = get_u32(r)?;
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unknown dtype tag {dtype}")));
    }
    let rank = get_u32(r)? as usize;
    if !(1..=3).contains(&rank) {
        return Err(Error::Format(format!("unsupported tensor rank {rank}")));
    }
    let mut dims = [1usize; 3];
    for d in dims.iter_mut().skip(3 - rank) {
        *d = get_u32(r)? as usize;
    }
    let n = dims.iter().map(|d| *d as u64).product::<u64>();
    if n > MAX_ELEMENTS {
        return Err(Error::Format(format!("tensor of {n} elements is too large")));
    }
    let data = get_reals(r, dtype, n as usize)?;
    Tensor::new(dims[0], dims[1], dims[2], data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut open(path.as_ref())?)
}

// ---------------------------------------------------------------- pyramids

pub fn write_pyramid(w: &mut impl Write, p: &FeaturePyramid) -> Result<()> {
    put_u32(w, p.levels.len() as u32)?;
    for l in &p.levels {
        put_u32(w, l.stride as u32)?;
        write_tensor(w, &l.activation)?;
    }
    Ok(())
}

/// Parses and validates a pyramid; strides must be non-decreasing.
pub fn read_pyramid(r: &mut impl Read) -> Result<FeaturePyramid> {
    let k = get_u32(r)? as usize;
    if k == 0 || k > 64 {
        return Err(Error::Format(format!("implausible pyramid level count {k}")));
    }
    let mut levels = Vec::with_capacity(k);
    for _ in 0..k {
        let stride = get_u32(r)? as usize;
        let activation = read_tensor(r)?;
        levels.push(PyramidLevel { activation, stride });
    }
    FeaturePyramid::new(levels)
}

pub fn save_pyramid(path: impl AsRef<Path>, p: &FeaturePyramid) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_pyramid(&mut w, p)?;
    w.flush()?;
    Ok(())
}

/// Load externally computed activations. The result is used as-is, so no
/// backbone gradient ever flows into it.
pub fn inject_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    read_pyramid(&mut open(path.as_ref())?)
}

// ---------------------------------------------------------------- flow

pub fn write_flow(w: &mut impl Write, f: &FlowField) -> Result<()> {
    let (_, h, wd) = f.flow.shape();
    w.write_all(FLOW_MAGIC)?;
    put_u32(w, h as u32)?;
    put_u32(w, wd as u32)?;
    let mut bytes = Vec::with_capacity(16 * h * wd);
    for v in f.flow.data() {
        bytes.extend_from_slice(&(*v as f64).to_le_bytes());
    }
    w.write_all(&bytes)?;
    let mut bits = vec![0u8; (h * wd).div_ceil(8)];
    for (i, v) in f.valid.iter().enumerate() {
        if *v {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    w.write_all(&bits)?;
    Ok(())
}

pub fn read_flow(r: &mut impl Read) -> Result<FlowField> {
    expect_magic(r, FLOW_MAGIC)?;
    let h = get_u32(r)? as usize;
    let w = get_u32(r)? as usize;
    if (h as u64) * (w as u64) > MAX_ELEMENTS {
        return Err(Error::Format(format!("flow of {h}x{w} is too large")));
    }
    let data = get_reals(r, DTYPE_F64, 2 * h * w)?;
    let mut bits = vec![0u8; (h * w).div_ceil(8)];
    r.read_exact(&mut bits)?;
    let valid = (0..h * w).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    FlowField::new(Tensor::new(2, h, w, data)?, valid)
}

pub fn save_flow(path: impl AsRef<Path>, f: &FlowField) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_flow(&mut w, f)?;
    w.flush()?;
    Ok(())
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    read_flow(&mut open(path.as_ref())?)
}

// ---------------------------------------------------------------- models

pub fn write_model(w: &mut impl Write, m: &Model) -> Result<()> {
    m.validate()?;
    w.write_all(MODEL_MAGIC)?;
    put_u32(w, MODEL_VERSION)?;
    put_u32(w, NATIVE_DTYPE)?;
    let cfg = m.config();
    put_u32(w, cfg.levels() as u32)?;
    for n in &cfg.patterns_per_level {
        put_u32(w, *n as u32)?;
    }
    put_u32(w, cfg.css.pool_radius as u32)?;
    put_real(w, cfg.css.pattern_radius)?;
    put_u32(w, cfg.css.shift_mode.tag())?;
    put_u32(w, cfg.backbone.in_channels as u32)?;
    put_u32(w, cfg.backbone.stages.len() as u32)?;
    for s in &cfg.backbone.stages {
        for v in [s.convs, s.channels, s.kernel, s.downsample] {
            put_u32(w, v as u32)?;
        }
    }
    for l in &m.backbone.layers {
        put_reals(w, &l.weights)?;
        put_reals(w, &l.bias)?;
    }
    for l in &m.patterns.levels {
        for o in l.offsets_s.iter().chain(&l.offsets_t) {
            put_real(w, o.x)?;
            put_real(w, o.y)?;
        }
        put_real(w, l.log_bandwidth)?;
    }
    Ok(())
}

fn small(v: u32, what: &str) -> Result<usize> {
    if v > 1 << 16 {
        return Err(Error::Format(format!("implausible {what} {v}")));
    }
    Ok(v as usize)
}

pub fn read_model(r: &mut impl Read) -> Result<Model> {
    expect_magic(r, MODEL_MAGIC)?;
    check_version(r, "model", MODEL_VERSION)?;
    let dtype = get_u32(r)?;
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unknown dtype tag {dtype}")));
    }
    let k = small(get_u32(r)?, "level count")?;
    let mut per_level = Vec::with_capacity(k);
    for _ in 0..k {
        per_level.push(small(get_u32(r)?, "pattern count")?);
    }
    let pool_radius = small(get_u32(r)?, "pool radius")?;
    let pattern_radius = get_real(r, dtype)?;
    let shift_mode = ShiftMode::from_tag(get_u32(r)?)?;
    let in_channels = small(get_u32(r)?, "input channels")?;
    let stage_count = small(get_u32(r)?, "stage count")?;
    if stage_count != k {
        return Err(Error::Format(format!(
            "{stage_count} backbone stages but {k} pattern levels"
        )));
    }
    let mut stages = Vec::with_capacity(stage_count);
    for _ in 0..stage_count {
        stages.push(StageConfig {
            convs: small(get_u32(r)?, "conv count")?,
            channels: small(get_u32(r)?, "channel count")?,
            kernel: small(get_u32(r)?, "kernel size")?,
            downsample: small(get_u32(r)?, "downsample factor")?,
        });
    }
    let config = BackboneConfig {
        in_channels,
        stages,
    };
    config.validate()?;
    let css = CssConfig {
        pool_radius,
        pattern_radius,
        shift_mode,
    };
    css.validate()?;
    let mut layers = Vec::new();
    for (o, i, k) in config.layer_shapes() {
        let weights = get_reals(r, dtype, o * i * k * k)?;
        let bias = get_reals(r, dtype, o)?;
        layers.push(ConvParams::new(o, i, k, k, weights, bias)?);
    }
    let mut levels = Vec::with_capacity(k);
    for n in per_level {
        let read_offsets = |r: &mut _| -> Result<Vec<Offset>> {
            (0..n)
                .map(|_| Ok(Offset::new(get_real(r, dtype)?, get_real(r, dtype)?)))
                .collect()
        };
        let offsets_s = read_offsets(r)?;
        let offsets_t = read_offsets(r)?;
        levels.push(LevelPatterns {
            offsets_s,
            offsets_t,
            log_bandwidth: get_real(r, dtype)?,
        });
    }
    let model = Model {
        backbone: BackboneParams { config, layers },
        patterns: SamplingPatterns { levels },
        css,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, m: &Model) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_model(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(&mut open(path.as_ref())?)
}

// ---------------------------------------------------------------- keypoints

/// One `x y` pair per line; blank lines and `#` comments are ignored.
pub fn parse_keypoints(text: &str) -> Result<Vec<(Real, Real)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<Real>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) if x.is_finite() && y.is_finite() => out.push((x, y)),
            _ => {
                return Err(Error::Format(format!(
                    "keypoint line {}: expected two numbers, got {line:?}",
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn format_keypoints(points: &[(Real, Real)]) -> String {
    points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::test_util::random_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| (*v as f64).to_bits()).collect()
    }

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 3, 5, 7);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"FCST");
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::zeros(2, 3, 4);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!(word(0), TENSOR_VERSION);
        assert_eq!(word(1), NATIVE_DTYPE);
        assert_eq!(word(2), 3);
        assert_eq!((word(3), word(4), word(5)), (2, 3, 4));
        assert_eq!(buf.len(), 4 + 6 * 4 + 24 * std::mem::size_of::<Real>());
    }

    #[test]
    fn lower_rank_and_other_dtype_load() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"FCST");
        for v in [1u32, DTYPE_F32, 2, 2, 3] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [0.5f32, 1.0, 1.5, 2.0, 2.5, 3.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let t = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t.shape(), (1, 2, 3));
        assert_eq!(t.at(0, 1, 2), 3.0);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let t = Tensor::zeros(1, 2, 2);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        let err = read_tensor(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(Error::Version { .. })));
        let short = &buf[..buf.len() - 1];
        assert!(read_tensor(&mut &short[..]).is_err());
        assert!(read_tensor(&mut &b"FC"[..]).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn pyramid_roundtrip_and_stride_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = FeaturePyramid::new(vec![
            PyramidLevel {
                activation: random_tensor(&mut rng, 4, 8, 8),
                stride: 2,
            },
            PyramidLevel {
                activation: random_tensor(&mut rng, 5, 4, 4),
                stride: 4,
            },
            PyramidLevel {
                activation: random_tensor(&mut rng, 5, 4, 4),
                stride: 4,
            },
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_pyramid(&path, &p).unwrap();
        let q = inject_pyramid(&path).unwrap();
        assert_eq!(q.strides(), vec![2, 4, 4]);
        for (a, b) in p.levels.iter().zip(&q.levels) {
            assert_eq!(bits(&a.activation), bits(&b.activation));
        }

        let mut buf = Vec::new();
        put_u32(&mut buf, 2).unwrap();
        put_u32(&mut buf, 4).unwrap();
        write_tensor(&mut buf, &Tensor::zeros(1, 2, 2)).unwrap();
        put_u32(&mut buf, 2).unwrap();
        write_tensor(&mut buf, &Tensor::zeros(1, 4, 4)).unwrap();
        assert!(matches!(read_pyramid(&mut buf.as_slice()), Err(Error::StrideOrder(_))));
    }

    #[test]
    fn flow_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flow = random_tensor(&mut rng, 2, 5, 3);
        let valid: Vec<bool> = (0..15).map(|_| rng.gen_bool(0.5)).collect();
        let f = FlowField::new(flow, valid).unwrap();
        let mut buf = Vec::new();
        write_flow(&mut buf, &f).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 2 * 15 * 8 + 2);
        let g = read_flow(&mut buf.as_slice()).unwrap();
        assert_eq!(bits(&f.flow), bits(&g.flow));
        assert_eq!(f.valid, g.valid);
    }

    #[test]
    fn model_roundtrip_and_version_check() {
        let m = Model::init(ModelConfig::default(), 11).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let n = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(m, n);
        let mut again = Vec::new();
        write_model(&mut again, &n).unwrap();
        assert_eq!(buf, again);

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Version { .. })));
        let mut bad = buf.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(read_model(&mut bad.as_slice()).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn keypoint_text() {
        let pts = parse_keypoints("# header\n1 2\n\n3.5 4.25\n").unwrap();
        assert_eq!(pts, vec![(1.0, 2.0), (3.5, 4.25)]);
        assert_eq!(parse_keypoints(&format_keypoints(&pts)).unwrap(), pts);
        let err = parse_keypoints("1 2\n3\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
