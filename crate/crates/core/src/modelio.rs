//! `BMX1` model container.
//!
//! ```text
//! magic "BMX1" | version u32 | arch | tensor count u32 | tensors...
//! arch   = input ndim u32, dims u32..., layer count u32, layers...
//! layer  = kind u8, act_bit u8, field count u16, fields u32...
//! tensor = name len u32, name utf-8, dtype u8, ndim u32, dims u64..., payload
//! ```
//!
//! Everything is little-endian. `f32` payloads hold `4·∏dims` bytes; `packed1`
//! payloads hold the GEMM left-operand words of the weight matrix
//! (`rows = dims[0]`, `cols = ∏dims[1..]`), `8·rows·ceil(cols/64)` bytes.
//! See `docs/format.md` for an annotated dump.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitpack::{words_for, BitMatrix, WordLayout, A_PAD_FILL};
use crate::error::{Error, Result};
use crate::layers::{ConvGeometry, Layer, LayerSpec, Mode, Network};
use crate::qmath::QuantSpec;
use crate::tensor::TensorF32;

pub const MAGIC: [u8; 4] = *b"BMX1";
pub const VERSION: u32 = 1;

const MAX_NDIM: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    Packed1 = 1,
}

impl DType {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DType::F32),
            1 => Ok(DType::Packed1),
            _ => Err(Error::Format(format!("unknown dtype {v}"))),
        }
    }
}

mod kind {
    pub const QACTIVATION: u8 = 0;
    pub const QCONV: u8 = 1;
    pub const QFC: u8 = 2;
    pub const CONV: u8 = 3;
    pub const FC: u8 = 4;
    pub const BATCHNORM: u8 = 5;
    pub const MAXPOOL: u8 = 6;
    pub const TANH: u8 = 7;
    pub const SOFTMAX_CE: u8 = 8;
}

/// File sizes before and after [`convert`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionReport {
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub ratio: f64,
}

impl CompressionReport {
    pub fn new(bytes_before: u64, bytes_after: u64) -> Self {
        CompressionReport {
            bytes_before,
            bytes_after,
            ratio: bytes_before as f64 / bytes_after as f64,
        }
    }
}

/// Payload bytes of a packed `rows × cols` weight matrix.
pub fn packed_payload_len(rows: usize, cols: usize) -> usize {
    8 * rows * words_for(cols)
}

/// Name of parameter `field` of layer `index`.
pub fn tensor_name(index: usize, field: &str) -> String {
    format!("layer{index}.{field}")
}

fn encode_spec(spec: &LayerSpec) -> (u8, u8, Vec<u32>) {
    fn geometry(g: &ConvGeometry) -> Vec<u32> {
        [
            g.in_channels,
            g.filters,
            g.kernel.0,
            g.kernel.1,
            g.stride.0,
            g.stride.1,
            g.pad.0,
            g.pad.1,
        ]
        .iter()
        .map(|&v| v as u32)
        .collect()
    }
    match *spec {
        LayerSpec::QActivation { act_bit } => (kind::QACTIVATION, act_bit.bits() as u8, vec![]),
        LayerSpec::QConv { geom, act_bit } => (kind::QCONV, act_bit.bits() as u8, geometry(&geom)),
        LayerSpec::QFc { inputs, units, act_bit } => (kind::QFC, act_bit.bits() as u8, vec![inputs as u32, units as u32]),
        LayerSpec::Conv { geom, bias } => {
            let mut f = geometry(&geom);
            f.push(bias as u32);
            (kind::CONV, 0, f)
        }
        LayerSpec::Fc { inputs, units, bias } => (kind::FC, 0, vec![inputs as u32, units as u32, bias as u32]),
        LayerSpec::BatchNorm {
            channels,
            momentum,
            epsilon,
        } => (
            kind::BATCHNORM,
            0,
            vec![channels as u32, momentum.to_bits(), epsilon.to_bits()],
        ),
        LayerSpec::MaxPool { kernel, stride } => (
            kind::MAXPOOL,
            0,
            vec![kernel.0 as u32, kernel.1 as u32, stride.0 as u32, stride.1 as u32],
        ),
        LayerSpec::Tanh => (kind::TANH, 0, vec![]),
        LayerSpec::SoftmaxCe => (kind::SOFTMAX_CE, 0, vec![]),
    }
}

fn decode_spec(index: usize, kind_id: u8, act_bit: u8, fields: &[u32]) -> Result<LayerSpec> {
    let bad = |what: &str| Error::Format(format!("layer {index}: {what}"));
    let expect = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(bad(&format!("kind {kind_id} takes {n} fields, found {}", fields.len())))
        }
    };
    let quant = || QuantSpec::new(act_bit as u32).map_err(|_| bad(&format!("act_bit {act_bit} outside 1..=31")));
    let no_quant = || {
        if act_bit == 0 {
            Ok(())
        } else {
            Err(bad(&format!("act_bit {act_bit} on an unquantized layer")))
        }
    };
    let u = |i: usize| fields[i] as usize;
    let flag = |i: usize| match fields[i] {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(bad(&format!("flag value {v}"))),
    };
    let geometry = || ConvGeometry {
        in_channels: u(0),
        filters: u(1),
        kernel: (u(2), u(3)),
        stride: (u(4), u(5)),
        pad: (u(6), u(7)),
    };
    Ok(match kind_id {
        kind::QACTIVATION => {
            expect(0)?;
            LayerSpec::QActivation { act_bit: quant()? }
        }
        kind::QCONV => {
            expect(8)?;
            LayerSpec::QConv {
                geom: geometry(),
                act_bit: quant()?,
            }
        }
        kind::QFC => {
            expect(2)?;
            LayerSpec::QFc {
                inputs: u(0),
                units: u(1),
                act_bit: quant()?,
            }
        }
        kind::CONV => {
            expect(9)?;
            no_quant()?;
            LayerSpec::Conv {
                geom: geometry(),
                bias: flag(8)?,
            }
        }
        kind::FC => {
            expect(3)?;
            no_quant()?;
            LayerSpec::Fc {
                inputs: u(0),
                units: u(1),
                bias: flag(2)?,
            }
        }
        kind::BATCHNORM => {
            expect(3)?;
            no_quant()?;
            LayerSpec::BatchNorm {
                channels: u(0),
                momentum: f32::from_bits(fields[1]),
                epsilon: f32::from_bits(fields[2]),
            }
        }
        kind::MAXPOOL => {
            expect(4)?;
            no_quant()?;
            LayerSpec::MaxPool {
                kernel: (u(0), u(1)),
                stride: (u(2), u(3)),
            }
        }
        kind::TANH => {
            expect(0)?;
            no_quant()?;
            LayerSpec::Tanh
        }
        kind::SOFTMAX_CE => {
            expect(0)?;
            no_quant()?;
            LayerSpec::SoftmaxCe
        }
        other => return Err(bad(&format!("unknown layer kind {other}"))),
    })
}

/// One tensor of a network in file order.
enum Stored<'a> {
    F32(&'a TensorF32),
    Vec(&'a [f32]),
    Packed(&'a [usize], &'a BitMatrix),
}

fn stored_tensors(net: &Network) -> Vec<(String, Stored<'_>)> {
    let packed = net.stores_packed();
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Linear(l) => {
                match (packed && l.is_binary(), l.packed_weight()) {
                    (true, Some(bits)) => out.push((tensor_name(i, "weight"), Stored::Packed(l.weight().dims(), bits))),
                    _ => out.push((tensor_name(i, "weight"), Stored::F32(l.weight()))),
                }
                if let Some(b) = l.bias() {
                    out.push((tensor_name(i, "bias"), Stored::F32(b)));
                }
            }
            Layer::BatchNorm(bn) => {
                out.push((tensor_name(i, "gamma"), Stored::F32(bn.gamma())));
                out.push((tensor_name(i, "beta"), Stored::F32(bn.beta())));
                out.push((tensor_name(i, "running_mean"), Stored::Vec(&bn.running_mean)));
                out.push((tensor_name(i, "running_var"), Stored::Vec(&bn.running_var)));
            }
            _ => {}
        }
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor_header(buf: &mut Vec<u8>, name: &str, dtype: DType, dims: &[usize]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype as u8);
    put_u32(buf, dims.len() as u32);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `net`. Weights must be finite.
pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION);

    put_u32(&mut buf, net.input_dims().len() as u32);
    for &d in net.input_dims() {
        put_u32(&mut buf, d as u32);
    }
    put_u32(&mut buf, net.specs().len() as u32);
    for spec in net.specs() {
        let (kind_id, act_bit, fields) = encode_spec(spec);
        buf.push(kind_id);
        buf.push(act_bit);
        buf.extend_from_slice(&(fields.len() as u16).to_le_bytes());
        for f in fields {
            put_u32(&mut buf, f);
        }
    }

    let tensors = stored_tensors(net);
    put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in &tensors {
        match t {
            Stored::F32(t) => {
                if !t.is_finite() {
                    return Err(Error::InvalidArgument(format!("{name} contains NaN or infinity")));
                }
                put_tensor_header(&mut buf, name, DType::F32, t.dims());
                put_f32s(&mut buf, t.data());
            }
            Stored::Vec(v) => {
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::InvalidArgument(format!("{name} contains NaN or infinity")));
                }
                put_tensor_header(&mut buf, name, DType::F32, &[v.len()]);
                put_f32s(&mut buf, v);
            }
            Stored::Packed(dims, bits) => {
                put_tensor_header(&mut buf, name, DType::Packed1, dims);
                for w in bits.words() {
                    buf.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Entry<'a> {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    payload: &'a [u8],
}

fn read_entry<'a>(r: &mut Reader<'a>, index: usize) -> Result<Entry<'a>> {
    let what = format!("tensor #{index}");
    let name_len = r.u32(&what)? as usize;
    let name = std::str::from_utf8(r.take(name_len, &what)?)
        .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?
        .to_string();
    let dtype = DType::from_u8(r.u8(&name)?)?;
    let ndim = r.u32(&name)?;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Format(format!("{name}: rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let d = r.u64(&name)?;
        let d = usize::try_from(d)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Format(format!("{name}: dimension {d}")))?;
        dims.push(d);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("{name}: dims {dims:?} overflow")))?;
    let len = match dtype {
        DType::F32 => count.checked_mul(4),
        DType::Packed1 => (8 * words_for(count / dims[0])).checked_mul(dims[0]),
    }
    .ok_or_else(|| Error::Format(format!("{name}: payload size overflows")))?;
    let payload = r.take(len, &name)?;
    Ok(Entry {
        name,
        dtype,
        dims,
        payload,
    })
}

fn f32s(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn read_header(r: &mut Reader<'_>) -> Result<()> {
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        // "BMX<digit>" is this format at another revision
        if magic[..3] == MAGIC[..3] && magic[3].is_ascii_digit() {
            return Err(Error::UnsupportedVersion((magic[3] - b'0') as u32));
        }
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

/// Parses a model; the result is fully validated or nothing is returned.
pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    read_header(&mut r)?;

    let ndim = r.u32("input rank")?;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Format(format!("input rank {ndim}")));
    }
    let mut input_dims = Vec::new();
    for _ in 0..ndim {
        input_dims.push(r.u32("input dims")? as usize);
    }
    let layer_count = r.u32("layer count")?;
    let mut specs = Vec::new();
    for i in 0..layer_count as usize {
        let what = format!("layer {i}");
        let kind_id = r.u8(&what)?;
        let act_bit = r.u8(&what)?;
        let n = r.u16(&what)? as usize;
        let mut fields = Vec::with_capacity(n);
        for _ in 0..n {
            fields.push(r.u32(&what)?);
        }
        specs.push(decode_spec(i, kind_id, act_bit, &fields)?);
    }
    let mut net =
        Network::new(&input_dims, specs, 0).map_err(|e| Error::ArchMismatch(format!("invalid architecture: {e}")))?;

    let count = r.u32("tensor count")?;
    let mut entries = Vec::new();
    for i in 0..count as usize {
        entries.push(read_entry(&mut r, i)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }

    let expected: Vec<(String, Vec<usize>, bool)> = stored_tensors(&net)
        .into_iter()
        .map(|(name, t)| match t {
            Stored::F32(t) => (name, t.dims().to_vec(), false),
            Stored::Vec(v) => (name, vec![v.len()], false),
            Stored::Packed(..) => unreachable!("fresh network stores floats"),
        })
        .collect();
    let binary_weights: Vec<String> = net.binary_layers().iter().map(|&i| tensor_name(i, "weight")).collect();
    if entries.len() != expected.len() {
        return Err(Error::ArchMismatch(format!(
            "architecture has {} tensors, file has {}",
            expected.len(),
            entries.len()
        )));
    }
    let mut packed = Vec::new();
    for (entry, (name, dims, _)) in entries.iter().zip(&expected) {
        if entry.name != *name {
            return Err(Error::ArchMismatch(format!("expected tensor {name}, found {}", entry.name)));
        }
        if entry.dims != *dims {
            return Err(Error::ArchMismatch(format!(
                "{name} has dims {:?}, architecture needs {dims:?}",
                entry.dims
            )));
        }
        if entry.dtype == DType::Packed1 && !binary_weights.contains(name) {
            return Err(Error::ArchMismatch(format!("{name} is packed but not a binary layer weight")));
        }
        if entry.dtype == DType::Packed1 {
            packed.push(name.clone());
        }
    }
    if !packed.is_empty() && packed.len() != binary_weights.len() {
        return Err(Error::ArchMismatch(
            "some but not all binary layer weights are packed".into(),
        ));
    }

    for entry in entries {
        let (index, field) = parse_name(&entry.name)?;
        match entry.dtype {
            DType::Packed1 => {
                let rows = entry.dims[0];
                let k = entry.dims[1..].iter().product::<usize>();
                let words = entry
                    .payload
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let bits = BitMatrix::from_words(rows, k, WordLayout::VectorMajor, A_PAD_FILL, words)
                    .map_err(|e| Error::Format(format!("{}: {e}", entry.name)))?;
                net.install_packed(index, bits)?;
            }
            DType::F32 => {
                let values = f32s(entry.payload);
                if !values.iter().all(|v| v.is_finite()) {
                    return Err(Error::Format(format!("{} contains NaN or infinity", entry.name)));
                }
                match &mut net.layers_mut()[index] {
                    Layer::BatchNorm(bn) if field == "running_mean" => bn.running_mean = values,
                    Layer::BatchNorm(bn) if field == "running_var" => bn.running_var = values,
                    _ => {
                        let p = net
                            .param_mut(index, field)
                            .ok_or_else(|| Error::ArchMismatch(format!("no parameter {}", entry.name)))?;
                        p.value.data_mut().copy_from_slice(&values);
                    }
                }
            }
        }
    }
    Ok(net)
}

fn parse_name(name: &str) -> Result<(usize, &str)> {
    name.strip_prefix("layer")
        .and_then(|rest| rest.split_once('.'))
        .and_then(|(i, field)| Some((i.parse().ok()?, field)))
        .ok_or_else(|| Error::Format(format!("bad tensor name {name:?}")))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?
        .to_os_string();
    file_name.push(".tmp");
    tmp.set_file_name(file_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(net)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    from_bytes(&fs::read(path)?)
}

/// Copy of a float model with its binary-layer weights packed.
pub fn pack_model(float_model: &Network) -> Result<Network> {
    if float_model.stores_packed() {
        return Err(Error::InvalidArgument("input model is already packed".into()));
    }
    if float_model.binary_layers().is_empty() {
        log::warn!("model has no binary layers; nothing to pack");
    }
    let mut net = float_model.clone();
    net.clear_caches();
    net.pack_binary_weights()?;
    Ok(net)
}

/// Packs the binary-layer weights of a float model file.
pub fn convert(in_path: impl AsRef<Path>, out_path: impl AsRef<Path>) -> Result<CompressionReport> {
    let before = fs::read(in_path.as_ref())?;
    let net = pack_model(&from_bytes(&before)?)?;
    let after = to_bytes(&net)?;
    write_atomic(out_path.as_ref(), &after)?;
    Ok(CompressionReport::new(before.len() as u64, after.len() as u64))
}

/// Seed of the random inputs used by [`verify_equivalence`].
pub const VERIFY_SEED: u64 = 0x5eed;

/// Compares `float_model` in float inference against `packed_model` in
/// packed inference on `n_samples` uniform `[0, 1]` inputs: binary layer
/// outputs must be identical and logits within `1e-5`.
pub fn verify_equivalence(float_model: &Network, packed_model: &Network, n_samples: usize) -> Result<bool> {
    if float_model.specs() != packed_model.specs() || float_model.input_dims() != packed_model.input_dims() {
        return Err(Error::ArchMismatch("models have different architectures".into()));
    }
    if n_samples == 0 {
        log::warn!("verify_equivalence with zero samples is vacuous");
        return Ok(true);
    }
    let mut packed_model = std::borrow::Cow::Borrowed(packed_model);
    if !packed_model.is_packed() {
        packed_model.to_mut().prepare_packed();
    }
    let binary = float_model.binary_layers();
    let logits_at = float_model.specs().len() - 2;
    let item: usize = float_model.input_dims().iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
    const CHUNK: usize = 16;
    let mut done = 0;
    while done < n_samples {
        let batch = CHUNK.min(n_samples - done);
        let data = (0..batch * item).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let mut dims = vec![batch];
        dims.extend_from_slice(float_model.input_dims());
        let x = TensorF32::new(dims, data)?;
        let a = float_model.trace(&x, Mode::InferFloat)?;
        let b = packed_model.trace(&x, Mode::InferPacked)?;
        if binary.iter().any(|&i| a[i].data() != b[i].data()) {
            return Ok(false);
        }
        let close = a[logits_at]
            .data()
            .iter()
            .zip(b[logits_at].data())
            .all(|(x, y)| (x - y).abs() <= 1e-5);
        if !close {
            return Ok(false);
        }
        done += batch;
    }
    Ok(true)
}
